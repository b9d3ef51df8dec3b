import json

import numpy as np
import pytest

from sdat_lab import autodiff as ad
from sdat_lab.config import TrainConfig
from sdat_lab.data import DomainPair, LabeledDataset, toy_pair
from sdat_lab.models import init
from sdat_lab.trainer import (
    Trainer,
    TrainingError,
    _task_forward,
    evaluate,
    load_checkpoint,
    multi_seed,
    summarize,
    train,
)

SMALL = {"train.epochs": "3", "train.iters": "8", "train.batch": "16"}


@pytest.fixture(scope="module")
def pair():
    return toy_pair(n=120, seed=3)


def cfg(**kw):
    return TrainConfig({**SMALL, **{k.replace("__", "."): str(v) for k, v in kw.items()}})


def metrics_bytes(config, pair, tmp_path, name):
    train(config, tmp_path / name, pair=pair)
    return (tmp_path / name / "metrics.jsonl").read_bytes()


@pytest.mark.parametrize("mode", ["task", "adv", "all"])
def test_zero_rho_collapses_to_plain_training(pair, tmp_path, mode):
    over = {"sam.mode": mode, "sam.rho_task": "0", "sam.rho_adv": "0"}
    base = metrics_bytes(cfg(), pair, tmp_path, "dat")
    smoothed = metrics_bytes(TrainConfig({**SMALL, **over}), pair, tmp_path, mode)
    assert smoothed == base


def test_zero_lr_freezes_parameters(pair):
    config = cfg(opt__lr0=0, opt__disc_lr0=0, sam__mode="all", sam__rho_adv=0.1)
    _, tr = train(config, pair=pair)
    assert np.array_equal(tr.params.flat, Trainer(config, pair).params.flat)


def test_task_perturbation_leaves_discriminator_alone(pair):
    tr = Trainer(cfg(sam__mode="task", sam__rho_task=0.5), pair)
    xs, ys, _ = tr.sample_batch()
    tape = ad.Tape()
    leaf = tape.watch(tr.params.flat)
    (g,) = tape.gradient(_task_forward(tr.params, leaf, xs, ys, 0.0), [leaf])
    phi = tr.params.scope("phi")
    before = tr.params.flat.copy()
    eps = tr.task_opt.first_step(tr.params.flat, g)
    assert np.array_equal(tr.params.flat[phi], before[phi])
    assert np.linalg.norm(eps) == pytest.approx(0.5, rel=1e-9)
    assert not np.array_equal(tr.params.flat, before)


def test_same_seed_same_bytes(pair, tmp_path):
    c = cfg(sam__mode="all", sam__rho_adv=0.2)
    assert metrics_bytes(c, pair, tmp_path, "a") == metrics_bytes(c, pair, tmp_path, "b")
    assert metrics_bytes(c.updated(train__seed=1), pair, tmp_path, "c") != metrics_bytes(
        c, pair, tmp_path, "d"
    )


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_resume_matches_uninterrupted(pair, tmp_path, kind):
    c = cfg(sam__mode="all", sam__rho_adv=0.2, opt__kind=kind)
    train(c, tmp_path / "full", pair=pair)
    train(c, tmp_path / "part", pair=pair, stop_after=1)
    train(c, tmp_path / "part", pair=pair, resume=tmp_path / "part" / "checkpoint.json")
    for name in ("metrics.jsonl", "checkpoint.json"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_rejects_other_config(pair, tmp_path):
    train(cfg(), tmp_path / "r", pair=pair, stop_after=1)
    with pytest.raises(TrainingError):
        train(cfg(train__batch=8), pair=pair, resume=tmp_path / "r" / "checkpoint.json")


def test_checkpoint_loads_back(pair, tmp_path):
    _, tr = train(cfg(), tmp_path / "ck", pair=pair)
    config, params, state = load_checkpoint(tmp_path / "ck" / "checkpoint.json")
    assert config.hash() == tr.config.hash()
    assert np.array_equal(params.flat, tr.params.flat)
    assert state["epoch"] == 3
    assert evaluate(params, pair) == evaluate(tr.params, pair)


def test_source_only_ignores_discriminator(pair):
    # with the reversal switched off, psi/theta follow the task gradient alone
    a, ta = train(cfg(grl__hi=0, opt__disc_lr0=0), pair=pair)
    b, tb = train(cfg(grl__hi=0, opt__disc_lr0=0, model__disc_hidden=7), pair=pair)
    sa, sb = ta.params.scope("psi", "theta"), tb.params.scope("psi", "theta")
    assert np.array_equal(ta.params.flat[sa], tb.params.flat[sb])
    assert [m.tgt_acc for m in a] == [m.tgt_acc for m in b]


def test_target_labels_never_reach_training(pair):
    y = pair.target.y.copy()
    np.random.default_rng(0).shuffle(y)
    shuffled = DomainPair(pair.source, LabeledDataset(pair.target.X, y, pair.target.meta))
    _, a = train(cfg(sam__mode="all", sam__rho_adv=0.1), pair=pair)
    _, b = train(cfg(sam__mode="all", sam__rho_adv=0.1), pair=shuffled)
    assert np.array_equal(a.params.flat, b.params.flat)


def test_evaluate_untrained_near_chance_and_pure(pair):
    params = init(cfg().model_spec, 11)
    before = params.copy()
    r1 = evaluate(params, pair)
    r2 = evaluate(params, pair)
    assert r1 == r2
    assert abs(r1["tgt_acc"] - 0.5) <= 0.35
    assert np.array_equal(params.flat, before.flat)
    for k, v in before.buffers.items():
        assert np.array_equal(params.buffers[k], v)


def test_metrics_schema(pair, tmp_path):
    train(cfg(), tmp_path / "m", pair=pair)
    lines = (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rows = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    for r in rows:
        assert set(r) == {
            "epoch",
            "task_loss",
            "domain_loss",
            "src_acc",
            "tgt_acc",
            "domain_acc",
            "lr",
            "eps_norm_mean",
            "wall_ms",
        }
        assert r["wall_ms"] == 0.0
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config_hash"] == cfg().hash()


def test_eps_norm_reported(pair):
    hist, _ = train(cfg(sam__mode="task", sam__rho_task=0.05), pair=pair)
    assert all(m.eps_norm_mean == pytest.approx(0.05, rel=1e-9) for m in hist)


def test_label_noise_changes_training(pair):
    a, _ = train(cfg(), pair=pair)
    b, _ = train(cfg(data__label_noise=0.3), pair=pair)
    assert a[-1].task_loss != b[-1].task_loss


def test_non_finite_input_aborts(pair):
    X = pair.source.X.copy()
    X[:] = np.nan
    bad = DomainPair(LabeledDataset(X, pair.source.y, pair.source.meta), pair.target)
    for mode in ("none", "task"):
        with pytest.raises(TrainingError):
            train(cfg(sam__mode=mode), pair=bad)


def test_dimension_mismatch_rejected(pair):
    with pytest.raises(TrainingError):
        Trainer(cfg(model__input_dim=3), pair)


def test_discriminator_step_lowers_its_loss(pair):
    tr = Trainer(cfg(opt__momentum=0), pair)
    from sdat_lab.trainer import _combined_forward, _disc_forward

    xs, ys, xt = tr.sample_batch()
    tape = ad.Tape()
    leaf = tape.watch(tr.params.flat)
    _, _, _, _, din = _combined_forward(tr.params, leaf, xs, ys, xt, 0.0, 0.0, None)

    def disc_loss():
        return _disc_forward(tr.params, ad.Tensor(tr.params.flat), din.data, len(xs)).item()

    before = disc_loss()
    tape = ad.Tape()
    leaf = tape.watch(tr.params.flat)
    (g,) = tape.gradient(_disc_forward(tr.params, leaf, din.data, len(xs)), [leaf])
    tr.disc_opt.step(tr.params.flat, g, 1e-4)
    assert disc_loss() < before


def test_multi_seed_summary(pair):
    r = multi_seed(cfg(train__epochs=1), [2, 0, 1], pair=pair)
    assert sorted(r["per_seed"]) == [0, 1, 2]
    finals = [r["per_seed"][s][-1].tgt_acc for s in (0, 1, 2)]
    assert r["summary"]["tgt_acc"]["mean"] == pytest.approx(np.mean(finals), abs=1e-15)
    assert r["summary"]["tgt_acc"]["std"] == pytest.approx(np.std(finals, ddof=1), abs=1e-15)
    again = multi_seed(cfg(train__epochs=1), [1, 2, 0], pair=pair)
    assert again["summary"] == r["summary"]


def test_summarize_single_value():
    assert summarize([0.7]) == {"mean": 0.7, "std": 0.0, "n": 1}
