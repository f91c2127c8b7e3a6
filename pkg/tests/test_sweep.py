import pytest

from apcascade.cascade import CascadeConfig, run_cascade
from apcascade.catalog import target_pairs
from apcascade.classifier import Classifier
from apcascade.errors import ArgumentError
from apcascade.gateway import Gateway, MockBackend
from apcascade.sweep import run_sweep

from conftest import grid_catalog, grid_seeds
from scripted import level_classification, level_generation


def scripted_gateway():
    def script(request):
        if request.purpose == "instruction_gen":
            return level_generation(request)
        return level_classification(request)

    return Gateway(MockBackend(script=script))


@pytest.fixture
def tuning():
    # bad values every 5th case: level 1 catches half of them, level 3 adds false alarms
    cat = grid_catalog(6, 2, neg_every=5, cases_per_pair=3)
    return cat, grid_seeds(cat, 6, marker="[level-0]")


def test_level_mock_peaks_at_two(tuning):
    cat, seeds = tuning
    gw = scripted_gateway()
    report = run_sweep(cat, seeds, CascadeConfig(M=6), range(0, 5), [2, 4, 6], gw, Classifier(gw, cat))
    f1 = {t: report.grid[(t, 6)] for t in range(5)}
    assert f1[0] == 0.0
    assert f1[0] < f1[1] < f1[2] and f1[3] < f1[2] and f1[2] == 1.0
    assert report.best_T == 2
    # M does not change the level here, so the tie goes to the smallest M
    assert report.chosen == (2, 2)
    assert report.to_dict()["chosen"] == {"T": 2, "M": 2}


def test_single_cell(tuning):
    cat, seeds = tuning
    gw = scripted_gateway()
    report = run_sweep(cat, seeds, CascadeConfig(M=6), [0], [6], gw, Classifier(gw, cat))
    assert report.chosen == (0, 6)
    assert list(report.grid) == [(0, 6)]
    # CoT needs no generation at all
    assert gw.calls("instruction_gen") == 0


def test_bad_ranges(tuning):
    cat, seeds = tuning
    gw = scripted_gateway()
    with pytest.raises(ArgumentError):
        run_sweep(cat, seeds, CascadeConfig(), [], [6], gw, Classifier(gw, cat))
    with pytest.raises(ArgumentError):
        run_sweep(cat, seeds, CascadeConfig(), [-1], [6], gw, Classifier(gw, cat))
    with pytest.raises(ArgumentError):
        run_sweep(cat, seeds, CascadeConfig(), [1], [6], gw, Classifier(gw, cat), task="applicability")


def test_snapshot_equals_shorter_run(tuning):
    """The sweep scores T from the snapshots of one deep run; that must equal a fresh run."""
    cat, seeds = tuning
    deep = run_cascade(cat, seeds, CascadeConfig(T=4, M=3, rng_seed=2), target_pairs(cat), scripted_gateway())
    for t in (2, 3):
        short = run_cascade(cat, seeds, CascadeConfig(T=t, M=3, rng_seed=2), target_pairs(cat), scripted_gateway())
        assert short.instructions == deep.snapshots[t]
