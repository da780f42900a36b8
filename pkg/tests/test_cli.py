import csv
import json

import pytest

from bias_asd.checkpoint import load_checkpoint
from bias_asd.cli import content_hash, main, manifest_path
from bias_asd.datamodel import load_dataset
from bias_asd.evaluation import ScoredFrame, average_precision, parse_predictions
from bias_asd.training import evaluate_map

TINY = ["--set", "visual_widths=4,4,4,8", "--set", "visual_blocks=1,1,1,1", "--set", "audio_widths=4,4,4,8",
        "--set", "audio_blocks=1,1,1,1", "--set", "embed_dim=8", "--set", "se_reduction=4",
        "--set", "heads=2", "--set", "crop_size=16", "--set", "batch_size=4", "--set", "clip_len=8"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["synth", "--out", str(data), "--num-clips", "6", "--frames", "10", "--image-size", "48",
                 "--seed", "2"]) == 0
    assert main(["train", "--data", str(data), "--epochs", "1", "--seed", "1", "--out", str(run), *TINY]) == 0
    return root, data, run


def test_synth_is_byte_reproducible(tmp_path):
    args = ["--num-clips", "2", "--frames", "5", "--image-size", "32", "--seed", "4"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    assert content_hash(tmp_path / "a") == content_hash(tmp_path / "b")
    run = json.loads(manifest_path(tmp_path / "a").read_text())
    assert run["command"] == "synth" and run["seed"] == 4


def test_usage_and_input_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--pred", str(tmp_path / "nope.csv"), "--gt", str(tmp_path / "x.csv"),
                 "--out", str(tmp_path / "r.json")]) == 1
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_key_exits_1(pipeline, tmp_path):
    _, data, _ = pipeline
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--set", "nonsense=3"]) == 1


def test_train_outputs(pipeline):
    _, _, run = pipeline
    for name in ("model.ckpt", "train_log.csv", "split.json", "train_curves.png"):
        assert (run / name).exists()
    meta = json.loads(manifest_path(run).read_text())
    assert meta["command"] == "train" and meta["inputs"]


def test_infer_then_eval_matches_library(pipeline):
    root, data, run = pipeline
    pred = root / "pred.csv"
    assert main(["infer", "--model", str(run / "model.ckpt"), "--data", str(data), "--out", str(pred)]) == 0
    report = root / "report.json"
    assert main(["eval", "--pred", str(pred), "--gt", str(data / "manifest.csv"), "--slice", "hbp",
                 "--out", str(report)]) == 0
    rows = json.loads(report.read_text())
    overall = next(r for r in rows["reports"] if r["slice"] == "all")
    model, _, _ = load_checkpoint(run / "model.ckpt")
    assert overall["value"] == pytest.approx(evaluate_map(model, load_dataset(data)), abs=1e-6)
    assert (root / "report.csv").exists() and (root / "report.png").exists()


def test_ablate_zeroing_everything_but_audio(pipeline):
    root, data, run = pipeline
    out = root / "abl.csv"
    assert main(["ablate", "--model", str(run / "model.ckpt"), "--data", str(data), "--zero", "face,body",
                 "--split", "val", "--out", str(out)]) == 0
    preds = parse_predictions(out.read_text())
    model, _, _ = load_checkpoint(run / "model.ckpt")
    val_ids = set(json.loads((run / "split.json").read_text())["val"])
    clips = [c for c in load_dataset(data) if c.clip_id in val_ids]
    assert {k[0] for k in preds} == val_ids
    assert len(preds) == sum(c.num_frames for c in clips)
    if any(c.labels.any() for c in clips):
        frames = [ScoredFrame((c.clip_id, c.entity_id, ts), preds[(c.clip_id, c.entity_id, ts)], y)
                  for c in clips for ts, y in zip(c.timestamps(), c.labels)]
        assert average_precision(frames) == pytest.approx(evaluate_map(model, clips, zero=("face", "body")),
                                                          abs=1e-6)


def test_ablate_rejects_unknown_modality(pipeline, tmp_path):
    _, data, run = pipeline
    assert main(["ablate", "--model", str(run / "model.ckpt"), "--data", str(data), "--zero", "nose",
                 "--out", str(tmp_path / "x.csv")]) == 1


def test_heatmap_and_importance(pipeline):
    root, data, run = pipeline
    hm = root / "hm"
    assert main(["heatmap", "--model", str(run / "model.ckpt"), "--data", str(data), "--clip", "clip_00000",
                 "--out", str(hm)]) == 0
    assert len(list(hm.glob("face_*.png"))) == 10 and len(list(hm.glob("body_*.png"))) == 10
    with open(hm / "gates.csv") as fh:
        assert next(csv.reader(fh)) == ["stream", "frame", "channel", "gate", "selected"]
    imp = root / "imp"
    assert main(["importance", "--model", str(run / "model.ckpt"), "--data", str(data), "--out", str(imp)]) == 0
    with open(imp / "importance.csv") as fh:
        rows = list(csv.DictReader(fh))
    clip_rows = [r for r in rows if r["row"] == "clip"]
    assert len(clip_rows) == 6
    for r in clip_rows:
        assert sum(float(r[m]) for m in ("audio", "face", "body")) == pytest.approx(1.0, abs=2e-6)


def test_captions_and_caption_eval(tmp_path):
    ann = tmp_path / "ann.csv"
    ann.write_text("image_id,gender,actions\n" + "".join(f"im{i},{'MALE' if i % 2 else 'FEMALE'},{1 + i % 14};7\n"
                                                          for i in range(20)))
    out = tmp_path / "caps"
    assert main(["captions", "--annotations", str(ann), "--out", str(out)]) == 0
    train = json.loads((out / "captions_train.json").read_text())
    test = json.loads((out / "captions_test.json").read_text())
    assert len(train["images"]) == 18 and len(test["images"]) == 2
    cand, refs = tmp_path / "cand.txt", tmp_path / "refs.txt"
    cand.write_text("a man is talking\n")
    refs.write_text("a man is talking|||a woman is talking\n")
    assert main(["caption-eval", "--cand", str(cand), "--refs", str(refs), "--out", str(tmp_path / "s.json")]) == 0
    scores = json.loads((tmp_path / "s.json").read_text())
    assert scores["BLEU-4"] == 1.0 and scores["ROUGE-L"] == 1.0
    refs.write_text("a\nb\n")
    assert main(["caption-eval", "--cand", str(cand), "--refs", str(refs)]) == 1
