import pytest
from conftest import tiny_run_config

from wsdefseg.config import SweepConfig, SynthConfig
from wsdefseg.sweep import MEDIAN, SWEEP_HEADER, SweepRow, ablation_sweep, median_rows
from wsdefseg.utils import read_csv


def row(alpha, seed, mdice):
    return SweepRow("weak", alpha, None, None, True, seed, mdice, mdice / 2, alpha == 0.5)


def test_median_rows_group_by_configuration():
    rows = [row(0.5, 1, 0.6), row(0.0, 1, 0.2), row(0.5, 2, 0.8), row(0.5, 3, 0.7), row(0.0, 2, 0.4)]
    medians = median_rows(rows)
    assert [(m.alpha, m.seed) for m in medians] == [(0.5, MEDIAN), (0.0, MEDIAN)]
    assert medians[0].mdice == pytest.approx(0.7)
    assert medians[1].mdice == pytest.approx(0.3)
    assert medians[0].default and not medians[1].default


def test_small_sweep(tmp_path):
    config = SweepConfig(
        alphas=[0.0, 0.5],
        betas=[(0.1, 0.5)],
        seeds=[1, 2],
        synth=SynthConfig(n_train=4, n_test=2, size=32, labeled_fraction=0.5),
        run=tiny_run_config(epochs=1),
    )
    rows = ablation_sweep(config, tmp_path / "work", tmp_path / "sweep.csv")
    per_seed = [r for r in rows if r.seed != MEDIAN]
    medians = [r for r in rows if r.seed == MEDIAN]
    assert len(per_seed) == 6 and len(medians) == 3
    keys = [(r.stage, r.alpha, r.beta1) for r in medians]
    assert keys == [("weak", 0.0, None), ("weak", 0.5, None), ("semi", 0.5, 0.1)]
    assert [r.default for r in medians] == [False, True, True]
    assert (tmp_path / "work" / "seed2" / "data" / "manifest.json").is_file()

    csv_rows = read_csv(tmp_path / "sweep.csv")
    assert list(csv_rows[0]) == list(SWEEP_HEADER)
    assert len(csv_rows) == 9


def test_consistency_only_student_gets_its_own_row(tmp_path):
    config = SweepConfig(
        alphas=[0.5],
        betas=[],
        consistency_only=True,
        seeds=[1],
        synth=SynthConfig(n_train=4, n_test=2, size=32, labeled_fraction=0.5),
        run=tiny_run_config(epochs=1),
    )
    rows = ablation_sweep(config, tmp_path / "work", tmp_path / "sweep.csv")
    semi = [r for r in rows if r.stage == "semi" and r.seed != MEDIAN]
    assert len(semi) == 1
    assert not semi[0].weak_term and not semi[0].default
    assert semi[0].beta1 is None and semi[0].beta2 == 0.5
    assert (tmp_path / "work" / "seed1" / "dten" / "semi_lc_only_0.5.wsds").is_file()
    csv_rows = read_csv(tmp_path / "sweep.csv")
    assert "weak_term" in csv_rows[0]
    assert {r["weak_term"] for r in csv_rows} == {"True", "False"}
