import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from toolseg.errors import DataError, LabelHygieneError, ParameterError
from toolseg.evaluation import EvalReport, dice, evaluate, mean_std
from toolseg.segmodel import ModelConfig, build_model, save_checkpoint
from toolseg.synthdata import REAL_L, REAL_UL, DatasetManifest, DatasetReader, ManifestItem


@pytest.mark.parametrize(
    "pred,truth,expected",
    [
        ([1, 1, 0, 0], [1, 1, 0, 0], 1.0),
        ([1, 1, 0, 0], [0, 0, 1, 1], 0.0),
        ([1, 1, 1, 1], [1, 0, 0, 0], 0.4),  # 2*1 / (4+1)
        ([1, 1, 0, 0], [1, 0, 0, 0], 2 / 3),
        ([0, 0, 0, 0], [0, 0, 0, 0], 1.0),
        ([0, 0, 0, 0], [1, 0, 0, 0], 0.0),
    ],
)
def test_dice_examples(pred, truth, expected):
    assert dice(np.array(pred), np.array(truth)) == pytest.approx(expected, abs=1e-15)


_mask = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


@settings(max_examples=100, deadline=None)
@given(_mask, _mask)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0
    assert dice(a, a) == 1.0


def test_dice_loop_oracle(rng):
    for _ in range(20):
        a = rng.integers(0, 2, (16, 16))
        b = rng.integers(0, 2, (16, 16))
        inter = na = nb = 0
        for i in range(16):
            for j in range(16):
                inter += a[i, j] and b[i, j]
                na += a[i, j]
                nb += b[i, j]
        assert dice(a, b) == pytest.approx(2 * inter / (na + nb), abs=1e-15)


def test_dice_shape_mismatch():
    with pytest.raises(ParameterError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_mean_std_population():
    assert mean_std([0.4, 0.6]) == pytest.approx((0.5, 0.1), abs=1e-15)
    assert mean_std([0.7]) == (0.7, 0.0)
    with pytest.raises(DataError):
        mean_std([])


def _write_split(root: Path, masks, split=REAL_L, audit_only=False) -> DatasetReader:
    items = []
    for k, m in enumerate(masks):
        h, w = m.shape
        img, msk = f"{split}/images/r{k}.png", f"{split}/masks/r{k}.png"
        for rel, arr in ((img, np.full((h, w, 3), 128, np.uint8)), (msk, (m * 255).astype(np.uint8))):
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(arr).save(root / rel)
        items.append(ManifestItem(f"r{k}", split, "real", k, img, msk, "", "", audit_only))
    h, w = masks[0].shape
    return DatasetReader(DatasetManifest(root, 0, h, w, 0.7, items))


def _constant_model(fg: bool):
    """Zero weights, head bias picks the class everywhere."""
    model = build_model(ModelConfig(widths=(4,)))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.head.bias[1 if fg else 0] = 1.0
    return model


def _mask_with(n_fg, shape=(8, 14)):
    m = np.zeros(shape[0] * shape[1], np.uint8)
    m[:n_fg] = 1
    return m.reshape(shape)


def test_evaluate_all_foreground_model(tmp_path):
    # 112 px; an all-foreground prediction against 28 and 48 true px gives 0.4 and 0.6
    reader = _write_split(tmp_path, [_mask_with(28), _mask_with(48)])
    rep = evaluate(_constant_model(fg=True), reader, REAL_L)
    assert rep.ids == ["r0", "r1"]
    assert rep.per_image == pytest.approx([0.4, 0.6], abs=1e-15)
    assert rep.mean == pytest.approx(0.5, abs=1e-15)
    assert rep.std == pytest.approx(0.1, abs=1e-15)


def test_evaluate_empty_masks_score_one(tmp_path):
    reader = _write_split(tmp_path, [_mask_with(0), _mask_with(0)])
    rep = evaluate(_constant_model(fg=False), reader, REAL_L)
    assert rep.per_image == [1.0, 1.0] and rep.std == 0.0


def test_evaluate_checkpoint_path_and_report(tmp_path):
    reader = _write_split(tmp_path / "ds", [_mask_with(28), _mask_with(48)])
    save_checkpoint(tmp_path / "m.ckpt", _constant_model(fg=True), step=3, meta={"mode": "X"})
    rep = evaluate(tmp_path / "m.ckpt", reader, REAL_L)
    assert rep.meta == {"mode": "X"}
    rep.write(tmp_path / "out" / "eval.json")
    raw = (tmp_path / "out" / "eval.json").read_text()
    assert json.loads(raw)["mean"] == pytest.approx(0.5)
    again = evaluate(tmp_path / "m.ckpt", reader, REAL_L)
    assert again.to_json() == rep.to_json()
    assert EvalReport(**json.loads(raw)) == rep


def test_evaluate_errors(tmp_path):
    reader = _write_split(tmp_path, [_mask_with(5)])
    with pytest.raises(DataError):
        evaluate(_constant_model(True), reader, REAL_UL)
    (tmp_path / reader.items(REAL_L)[0].mask).unlink()
    with pytest.raises(DataError):
        evaluate(_constant_model(True), reader, REAL_L)


def test_evaluate_unlabeled_split_needs_audit(tmp_path):
    reader = _write_split(tmp_path, [_mask_with(5)], split=REAL_UL, audit_only=True)
    with pytest.raises(LabelHygieneError):
        evaluate(_constant_model(True), reader, REAL_UL)
    rep = evaluate(_constant_model(True), reader, REAL_UL, audit=True)
    assert rep.per_image == pytest.approx([2 * 5 / (112 + 5)])
