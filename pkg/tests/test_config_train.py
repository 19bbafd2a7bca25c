import numpy as np
import pytest

from vineseg import train as T
from vineseg.checkpoint import decode, encode, load_checkpoint
from vineseg.config import ConfigError, RunConfig, config_from_echo, dump_config, load_config, parse_config
from vineseg.data import load_dataset, load_trimap, save_trimap
from vineseg.kvfile import parse_groups
from vineseg.loss import weighted_cross_entropy
from vineseg.metrics import confusion_matrix, metric_dict
from vineseg.optim import AdamState, adam_step, model_grads
from vineseg.tensor import Tensor


def small(data_dir, tmp_path, **kw):
    base = dict(data_dir=str(data_dir), height=32, width=32, filters=(4, 8), epochs=2,
                split_train=3, split_valid=2, split_test=1, batch_size=2,
                checkpoint=str(tmp_path / "model.ckpt"), report=str(tmp_path / "report.txt"))
    base.update(kw)
    return RunConfig(**base)


# -- configuration ---------------------------------------------------------------

def test_parse_config_types_and_defaults():
    cfg = parse_config("mode = unsupervised\ndata_dir = d\nfilters = 8,16\nclass_weights = off\nlr = 0.01\n")
    assert cfg.mode == "unsupervised" and cfg.filters == (8, 16)
    assert cfg.class_weights is False and cfg.lr == 0.01 and cfg.epochs == 50 and cfg.batch_size == 4


def test_unknown_key_and_bad_values_are_reported_with_lines():
    with pytest.raises(ConfigError) as err:
        parse_config("data_dir = d\n# note\nlearning_rate = 1\nepochs = many\n", "run.cfg")
    text = str(err.value)
    assert "run.cfg:3" in text and "learning_rate" in text
    assert "run.cfg:4" in text and "epochs" in text


def test_semantic_violations():
    with pytest.raises(ConfigError, match="epochs"):
        parse_config("data_dir = d\nepochs = 0\n")
    with pytest.raises(ConfigError, match="divisible"):
        parse_config("data_dir = d\nheight = 30\n")
    with pytest.raises(ConfigError, match="fcm_clusters"):
        parse_config("mode = unsupervised\ndata_dir = d\nfcm_clusters = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("epochs = 1\nepochs = 2\n")


def test_paths_checked_at_run_start(tmp_path):
    cfg = RunConfig(data_dir=str(tmp_path / "nowhere"), report=str(tmp_path / "no" / "r.txt"))
    with pytest.raises(ConfigError) as err:
        T.train_supervised(cfg)
    assert "nowhere" in str(err.value) and "report" in str(err.value)


def test_load_config_relative_paths_and_overrides(tmp_path, tiny_data):
    (tmp_path / "run.cfg").write_text(f"data_dir = {tiny_data}\ncheckpoint = out.ckpt\nepochs = 3\n")
    cfg = load_config(tmp_path / "run.cfg", {"epochs": "1"})
    assert cfg.epochs == 1
    assert cfg.resolve(cfg.checkpoint) == tmp_path / "out.ckpt"


def test_echo_round_trip():
    cfg = RunConfig(data_dir="d", filters=(8, 16, 32), lr=3e-4, sigmoid_correction=True)
    again = config_from_echo(cfg.echo())
    assert again.echo() == cfg.echo()
    assert parse_config(dump_config(cfg)).echo() == cfg.echo()


# -- supervised ------------------------------------------------------------------

def test_smoke_one_epoch_two_images(tiny_data, tmp_path):
    cfg = small(tiny_data, tmp_path, epochs=1, split_train=1, split_valid=1, split_test=0)
    res = T.train_supervised(cfg)
    groups = parse_groups((tmp_path / "report.txt").read_text())
    keys = {k for _, k, _ in groups[0]}
    assert {"epoch", "train_loss", "val_pa", "val_mean_iou"} <= keys
    assert (tmp_path / "model.ckpt").exists()
    assert set(res.checkpoint.tensors) == set(res.model.parameters())


def test_loss_decreases_on_fixed_batch():
    from vineseg.synth import generate_samples
    from vineseg.arch import UNetSpec, build_unet

    samples = generate_samples(4, 64, 64, seed=0)
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])
    wins = 0
    for seed in range(3):
        model = build_unet(UNetSpec((3, 64, 64), (4, 8)), seed=seed)
        params, st, losses = model.parameters(), AdamState(lr=1e-3), []
        for _ in range(20):
            loss = weighted_cross_entropy(model(Tensor(x)), y)
            losses.append(loss.item())
            model.zero_grad()
            loss.backward()
            adam_step(params, model_grads(params), st)
        wins += losses[-1] < losses[0]
    assert wins >= 2


def test_full_run_determinism(tiny_data, tmp_path):
    cfg = small(tiny_data, tmp_path, augment_copies=1)
    outs = []
    for _ in range(2):
        T.train_supervised(cfg)
        outs.append(((tmp_path / "model.ckpt").read_bytes(), (tmp_path / "report.txt").read_bytes()))
    assert outs[0] == outs[1]


def test_checkpoint_round_trip_preserves_predictions(tiny_data, tmp_path):
    res = T.train_supervised(small(tiny_data, tmp_path))
    ckpt = load_checkpoint(tmp_path / "model.ckpt")
    assert encode(decode(encode(ckpt))) == (tmp_path / "model.ckpt").read_bytes()
    img = load_dataset(tiny_data)[0].image
    direct = T.predict(T.Segmenter(res.model, config_from_echo(res.checkpoint.config)), img)
    again = T.predict(ckpt, img)
    assert np.array_equal(direct, again)
    assert np.array_equal(T.predict(ckpt, img), again)
    assert again.shape == img.shape[1:] and again.max() < 3


def test_validation_metrics_equal_recomputation_from_dumped_masks(tiny_data, tmp_path):
    cfg = small(tiny_data, tmp_path, epochs=3)
    res = T.train_supervised(cfg)
    _, valid, _ = T._load_splits(cfg, require_trimaps=True)
    seg = T.Segmenter(res.model, cfg)
    preds = seg.predict([s.image for s in valid])
    dumped = []
    for s, p in zip(valid, preds):
        path = tmp_path / f"{s.name}_pred.png"
        save_trimap(p, path)
        dumped.append(load_trimap(path))
    recomputed = metric_dict(confusion_matrix(dumped, [s.mask for s in valid], 3), prefix="val_")
    best = int(res.checkpoint.metrics["best_epoch"])
    logged = res.report[best - 1]
    for k, v in recomputed.items():
        assert np.isclose(logged[k], v, equal_nan=True, rtol=0, atol=1e-12)


def test_non_finite_loss_aborts(tiny_data, tmp_path, monkeypatch):
    monkeypatch.setattr(T, "weighted_cross_entropy", lambda logits, *a: (logits * float("nan")).sum())
    with pytest.raises(T.TrainingError, match="non-finite loss"):
        T.train_supervised(small(tiny_data, tmp_path))


def test_label_range_check():
    from vineseg.data import Sample
    with pytest.raises(T.TrainingError, match="class-count mismatch"):
        T._check_label_range([Sample("x", None, np.array([[0, 2]]), "x")], 2)


def test_merge_labels_two_classes():
    assert T.merge_labels(np.array([[0, 1, 2]]), 2).tolist() == [[0, 1, 1]]


# -- unsupervised ----------------------------------------------------------------

def test_two_tone_two_clusters_separate_foreground(two_tone_data, tmp_path):
    cfg = small(two_tone_data, tmp_path, mode="unsupervised", fcm_clusters=2, num_classes=2,
                split_train=6, split_valid=0, split_test=2, epochs=40, fcm_q=1.2)
    res = T.train_unsupervised(cfg)
    assert res.checkpoint.metrics["test_pa"] > 0.95
    assert "test_iou.leaf" in res.checkpoint.metrics


def test_unsupervised_training_never_reads_labels(two_tone_data, tmp_path, monkeypatch):
    cfg = small(two_tone_data, tmp_path, mode="unsupervised", split_valid=0, split_test=0, epochs=1, report="")
    calls = []
    real = T.train_unsupervised.__globals__["fcm_loss"]

    def spy(u, y, fcm):
        calls.append(y.shape)
        return real(u, y, fcm)

    monkeypatch.setattr(T, "fcm_loss", spy)
    res = T.train_unsupervised(cfg)
    assert calls and all(shape[1] == 3 for shape in calls)
    assert "train_pa" in res.checkpoint.metrics


def test_more_clusters_widen_output(two_tone_data, tmp_path):
    cfg = small(two_tone_data, tmp_path, mode="unsupervised", fcm_clusters=5, split_valid=0, split_test=2, epochs=2)
    res = T.train_unsupervised(cfg)
    seg = T.Segmenter.from_checkpoint(res.checkpoint)
    img = load_dataset(two_tone_data)[0].image
    mask, probs = T.predict(seg, img, with_probs=True)
    assert probs.shape[0] == 5 and mask.max() < 5
    assert np.allclose(probs.sum(axis=0), 1.0, atol=1e-5)
