import numpy as np
import pytest
import torch
from torch.nn import functional as F

from eegcond.dataset import DatasetError, SubjectProfile, split_subjects
from eegcond.models import ModelSpec, build_model
from eegcond.training import (LabeledSet, TrainConfig, ablation_table, dominance_eval,
                              evaluate, predict_logits, score_predictions, split_sets, train,
                              variant_name)


@pytest.fixture(scope="module")
def sets(small_pre):
    split = split_subjects(small_pre, 2, seed=0)
    return split_sets(small_pre, split)


def _lstm_spec(ds_or_set, use_ids=False):
    x = ds_or_set.x
    return ModelSpec("lstm", use_ids, n_channels=x.shape[1], n_times=x.shape[2])


def _params(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(precision=16)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    assert TrainConfig().lr == 1e-4 and TrainConfig().batch_size == 128


def test_first_adam_step_closed_form(sets):
    # after one step from zero moments, Adam moves each weight by
    # lr * g / (|g| + eps) with g the full-batch gradient at initialisation
    data = sets["train"].subset(np.arange(40))
    spec = _lstm_spec(data)
    cfg = TrainConfig(lr=1e-3, batch_size=64, max_steps=1, val_fraction=0.0, precision=64,
                      seed=5)
    model, hist = train(spec, data, cfg)
    assert hist.steps == 1
    ref = build_model(spec, seed=5, dtype=torch.float64)
    init = _params(ref)
    loss = F.cross_entropy(ref(torch.as_tensor(data.x)), torch.as_tensor(data.y))
    loss.backward()
    for name, p in model.named_parameters():
        g = dict(ref.named_parameters())[name].grad
        want = init[name] - cfg.lr * g / (g.abs() + cfg.adam_eps)
        torch.testing.assert_close(p.detach(), want, rtol=0, atol=1e-12)


def test_zero_learning_rate_keeps_parameters(sets):
    data = sets["train"]
    spec = _lstm_spec(data)
    model, hist = train(spec, data, TrainConfig(lr=0.0, max_epochs=3, val_fraction=0.0,
                                                precision=64, seed=2))
    init = _params(build_model(spec, seed=2, dtype=torch.float64))
    assert hist.n_epochs == 3
    for name, p in model.named_parameters():
        assert torch.equal(p.detach(), init[name])


def test_early_stopping_on_a_flat_validation_curve(sets):
    # with lr 0 validation accuracy never improves after the first epoch
    data = sets["train"]
    cfg = TrainConfig(lr=0.0, max_epochs=50, patience=3, precision=64)
    _, hist = train(_lstm_spec(data), data, cfg)
    assert hist.n_epochs == hist.stopped_epoch == 4
    assert hist.best_epoch == 1
    assert len(set(hist.val_accuracy)) == 1


def test_training_is_deterministic_at_64_bit(sets):
    data = sets["train"]
    spec = ModelSpec("eegnet", True, n_channels=data.x.shape[1], n_times=77)
    cfg = TrainConfig(max_epochs=2, precision=64, seed=4, batch_size=32)
    a, ha = train(spec, data, cfg)
    b, hb = train(spec, data, cfg)
    assert ha.train_loss == hb.train_loss and ha.val_accuracy == hb.val_accuracy
    for (k, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), k


def test_history_rows_match_epochs(sets):
    data = sets["train"]
    _, hist = train(_lstm_spec(data), data, TrainConfig(max_epochs=3, patience=100))
    assert hist.n_epochs == 3
    assert len(hist.train_accuracy) == len(hist.val_accuracy) == 3
    lines = hist.to_csv("abc").splitlines()
    assert lines[0] == "# config_hash: abc"
    assert len(lines) == 2 + 3


def test_train_input_errors(sets):
    data = sets["train"]
    with pytest.raises(ValueError):
        train(_lstm_spec(data), data.subset([]), TrainConfig())
    no_codes = LabeledSet(data.x, data.y, data.subject_ids, data.conditions, None)
    with pytest.raises(DatasetError):
        train(_lstm_spec(data, True), no_codes, TrainConfig(max_epochs=1))
    wrong = ModelSpec("lstm", n_channels=data.x.shape[1] + 1, n_times=77)
    with pytest.raises(ValueError):
        train(wrong, data, TrainConfig(max_epochs=1))


# --- evaluation ---------------------------------------------------------------

def _constant_model(spec, cls):
    model = build_model(spec)
    with torch.no_grad():
        model.backbone.classify.weight.zero_()
        model.backbone.classify.bias.copy_(torch.tensor([1.0, 0.0] if cls == 0 else [0.0, 1.0]))
    return model.eval()


def test_score_perfect_and_constant_predictions(sets):
    s = {"within": sets["within"], "unseen": sets["unseen"]}
    perfect = score_predictions({k: v.y for k, v in s.items()}, s)
    assert perfect.accuracy == 1.0
    assert all(d["accuracy"] == 1.0 for d in perfect.per_split.values())
    zeros = score_predictions({k: np.zeros_like(v.y) for k, v in s.items()}, s)
    labels = np.concatenate([v.y for v in s.values()])
    assert zeros.accuracy == pytest.approx(np.mean(labels == 0), abs=1e-15)
    assert zeros.per_class_recall["target"]["within"]["accuracy"] == 1.0
    assert zeros.per_class_recall["distractor"]["within"]["accuracy"] == 0.0


def test_constant_model_on_balanced_set(sets):
    data = sets["within"]
    y = data.y
    k = min(np.sum(y == 0), np.sum(y == 1))
    idx = np.concatenate([np.flatnonzero(y == 0)[:k], np.flatnonzero(y == 1)[:k]])
    balanced = data.subset(idx)
    for cls in (0, 1):
        rep = evaluate(_constant_model(_lstm_spec(data), cls), balanced)
        assert rep.accuracy == 0.5 and rep.n == 2 * k


def test_evaluate_is_permutation_invariant(sets):
    data = sets["unseen"]
    model = build_model(_lstm_spec(data)).eval()
    perm = np.random.default_rng(0).permutation(len(data))
    a = evaluate(model, data)
    b = evaluate(model, data.subset(perm))
    assert a.accuracy == b.accuracy
    assert a.per_subject == b.per_subject


def test_logits_do_not_depend_on_batching(sets):
    data = sets["unseen"]
    model = build_model(_lstm_spec(data), dtype=torch.float64).eval()
    np.testing.assert_allclose(predict_logits(model, data, 7), predict_logits(model, data, 512),
                               rtol=1e-12, atol=1e-12)


def test_empty_evaluation_raises(sets):
    model = build_model(_lstm_spec(sets["within"]))
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, sets["within"].subset([]))
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, {})


def test_breakdown_counts_add_up(small_pre, sets):
    s = {"within": sets["within"], "unseen": sets["unseen"]}
    model = build_model(_lstm_spec(s["within"], True)).eval()
    rep = evaluate(model, s, small_pre.profiles)
    for split, data in s.items():
        assert rep.per_split[split]["n"] == len(data)
        assert sum(by[split]["n"] for by in rep.per_subject.values()
                   if split in by) == len(data)
        assert sum(by[split]["n"] for by in rep.per_dominance.values()) == len(data)
        assert sum(by[split]["n"] for by in rep.per_condition.values()
                   if split in by) == len(data)
    assert rep.n == sum(len(d) for d in s.values())
    rows = rep.to_csv().splitlines()
    assert rows[0] == "scope,split,key,n,accuracy"


def test_dominance_group_absent_is_none(small_pre, sets):
    data = sets["unseen"]
    profiles = {sid: SubjectProfile(sid, "visual", p.sex, p.music_education, p.active_musician)
                for sid, p in small_pre.profiles.items()}
    model = build_model(_lstm_spec(data)).eval()
    dom = dominance_eval(model, {"unseen": data}, profiles)
    assert dom["auditory"]["unseen"] is None
    assert dom["visual"]["unseen"] == evaluate(model, data).accuracy


# --- ablation -------------------------------------------------------------------

def test_ablation_table_structure(small_pre):
    cfg = TrainConfig(max_epochs=1, precision=64, batch_size=64)
    res = ablation_table(small_pre, ["lstm"], cfg, n_unseen=2)
    assert [(r["backbone"], r["use_ids"]) for r in res.rows] == [("lstm", False),
                                                                  ("lstm", True)]
    base, ids = res.rows
    for s in ("within", "unseen"):
        assert res.deltas["lstm"][s] == ids[s] - base[s]
        assert res.reports[variant_name("lstm", True)].per_split[s]["accuracy"] == ids[s]
    # the shared recurrent weights started from the same values
    init_b = build_model(res.models["lstm_base"].spec, seed=cfg.seed)
    init_i = build_model(res.models["lstm_ids"].spec, seed=cfg.seed)
    assert torch.equal(init_b.backbone.W_hh, init_i.backbone.W_hh)
    csv_lines = res.to_csv().splitlines()
    assert csv_lines[0] == "backbone,use_ids,within,unseen" and len(csv_lines) == 3
    assert res.to_dict()["split"] == res.split.to_dict()
