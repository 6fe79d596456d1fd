"""Desk-scale training trends on the synthetic dataset.

These train full-size desk models for several seeds and take tens of minutes;
run them with ``pytest -m slow``.
"""

import pytest

from wsdefseg.config import RunConfig, Stage, SweepConfig, SynthConfig
from wsdefseg.sweep import MEDIAN, ablation_sweep

pytestmark = pytest.mark.slow

SEEDS = [1, 2, 3]


def medians(rows):
    return {r.key(): r.mdice for r in rows if r.seed == MEDIAN}


def test_student_beats_teacher(tmp_path):
    config = SweepConfig(alphas=[0.5], betas=[(0.1, 0.5)], seeds=SEEDS, synth=SynthConfig(), run=RunConfig())
    rows = ablation_sweep(config, tmp_path)
    by_key = medians(rows)
    weak = by_key[(Stage.WEAK.value, 0.5, None, None, True, True)]
    semi = by_key[(Stage.SEMI.value, 0.5, 0.1, 0.5, True, True)]
    assert semi >= 0.70
    assert semi >= weak


def test_sparse_foreground_weight_peaks_in_the_middle(tmp_path):
    config = SweepConfig(alphas=[0.0, 0.5, 1.0], betas=[], seeds=SEEDS)
    by_key = medians(ablation_sweep(config, tmp_path))
    scores = {alpha: by_key[(Stage.WEAK.value, alpha, None, None, True, True)] for alpha in (0.0, 0.5, 1.0)}
    assert scores[0.5] > scores[0.0]
    assert scores[0.5] > scores[1.0]


def test_neck_helps(tmp_path):
    config = SweepConfig(alphas=[0.5], betas=[], seeds=SEEDS, use_dten=[True, False])
    by_key = medians(ablation_sweep(config, tmp_path))
    with_neck = by_key[(Stage.WEAK.value, 0.5, None, None, True, True)]
    without = by_key[(Stage.WEAK.value, 0.5, None, None, False, True)]
    assert with_neck >= without
