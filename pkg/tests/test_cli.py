import json
import subprocess
import sys

import pytest

from dyntrans.checkpoint import load_checkpoint
from dyntrans.cli import main, parse_encoder_spec
from dyntrans.data import read_dataset
from dyntrans.model import state_dict

TINY = {
    "model": {"depths": [3, 2], "embed_dim": 8, "pred_layers": 1, "pred_dim": 8},
    "encoder": {"model_dim": 8, "num_heads": 2, "ffn_dim": 12, "segment_frames": 2,
                "left_context_frames": 3, "right_context_frames": 1, "out_dim": 8},
    "dropout_plan": {"spec": "1-3:2", "rate": 0.2},
    "loss": {"alpha": 0.5, "beta": 0.5},
    "train": {"lr": 3e-3, "warmup": 4, "steps": 6, "batch": 4},
    "data": {"num_utterances": 12, "vocab_size": 6, "feature_dim": 5, "tokens_per_utt": [1, 3]},
}


def run(*argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


@pytest.fixture
def workdir(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    code, out = run("gen-data", "--config", cfg, "--out", tmp_path / "train.detd", "--seed", 1, capsys=capsys)
    assert code == 0 and json.loads(out)["utterances"] == 12
    run("gen-data", "--config", cfg, "--out", tmp_path / "test.detd", "--seed", 2, "--num", 4)
    capsys.readouterr()
    return tmp_path


def test_pipeline(workdir, capsys):
    w = workdir
    assert len(read_dataset(w / "test.detd")) == 4
    code, out = run("train", "--config", w / "tiny.json", "--data", w / "train.detd", "--mode", "collaborative",
                    "--out", w / "m.detc", "--seed", 3, capsys=capsys)
    assert code == 0 and json.loads(out)["step"] == 6
    for spec in ("full", "enc:2", "pruned:1-3:2", "switch:20,2,1"):
        code, _ = run("decode", "--ckpt", w / "m.detc", "--data", w / "test.detd", "--encoder", spec,
                      "--out", w / "hyp.jsonl", capsys=capsys)
        assert code == 0
        recs = [json.loads(line) for line in (w / "hyp.jsonl").read_text().splitlines()]
        assert len(recs) == 4 and all("total_flops" in r for r in recs)
    code, out = run("evaluate", "--hyp", w / "hyp.jsonl", "--ref", w / "test.detd", capsys=capsys)
    rep = json.loads(out)
    assert code == 0 and rep["ref_len"] > 0 and rep["wer"] >= 0
    code, out = run("bench", "--ckpt", w / "m.detc", "--data", w / "test.detd", "--burst-ms", 30, capsys=capsys)
    bench = json.loads(out)
    assert code == 0 and bench["summary"]["count"] == 4 and bench["summary"]["rtf"]["mean"] > 0
    assert bench["summary"]["total_flops"] == sum(bench["flops_per_utt"])


def test_export_decodes_like_pruned_view(workdir, capsys):
    w = workdir
    run("train", "--config", w / "tiny.json", "--data", w / "train.detd", "--mode", "layer_dropout",
        "--out", w / "ld.detc")
    capsys.readouterr()
    code, out = run("export", "--ckpt", w / "ld.detc", "--plan", "1-3:2", "--out", w / "small.detc", capsys=capsys)
    assert code == 0 and json.loads(out)["depth"] == 1
    run("decode", "--ckpt", w / "ld.detc", "--data", w / "test.detd", "--encoder", "pruned:1-3:2",
        "--out", w / "a.jsonl")
    run("decode", "--ckpt", w / "small.detc", "--data", w / "test.detd", "--encoder", "full", "--out", w / "b.jsonl")
    a = [json.loads(x) for x in (w / "a.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (w / "b.jsonl").read_text().splitlines()]
    assert [r["tokens"] for r in a] == [r["tokens"] for r in b]
    assert [r["total_flops"] for r in a] == [r["total_flops"] for r in b]


def test_identical_runs_and_resume(workdir):
    w = workdir
    common = ["--config", w / "tiny.json", "--data", w / "train.detd", "--mode", "collaborative", "--seed", 5]
    run("train", *common, "--out", w / "a.detc")
    run("train", *common, "--out", w / "b.detc")
    assert (w / "a.detc").read_bytes() == (w / "b.detc").read_bytes()
    run("train", *common, "--steps", 3, "--out", w / "half.detc")
    run("train", "--data", w / "train.detd", "--mode", "collaborative", "--resume", w / "half.detc",
        "--steps", 6, "--out", w / "resumed.detc")
    full, resumed = load_checkpoint(w / "a.detc"), load_checkpoint(w / "resumed.detc")
    assert resumed.state.step == 6
    for k, v in full.params.items():
        assert v.tobytes() == resumed.params[k].tobytes()
    assert resumed.rng.state() == full.rng.state()


def test_errors(workdir, capsys):
    w = workdir
    assert run("decode", "--ckpt", w / "missing.detc", "--data", w / "test.detd", "--out", w / "x")[0] == 2
    (w / "junk.detc").write_bytes(b"junk")
    assert run("decode", "--ckpt", w / "junk.detc", "--data", w / "test.detd", "--out", w / "x")[0] == 2
    bad = dict(TINY, train={"lr": 1e-3, "bogus": 1})
    (w / "bad.json").write_text(json.dumps(bad))
    assert run("gen-data", "--config", w / "bad.json", "--out", w / "y.detd")[0] == 2
    with pytest.raises(SystemExit):
        main(["train"])
    capsys.readouterr()


def test_encoder_spec_parsing(small_model):
    assert parse_encoder_spec("full", small_model)[0] == "single"
    assert parse_encoder_spec("enc:2", small_model)[1].depth == 3
    assert parse_encoder_spec("switch:40,2,1", small_model) == ("switch", 40.0, 1, 0)
    for bad in ("switch:40,3,1", "switch:40", "nope", "enc:9"):
        with pytest.raises((ValueError, IndexError)):
            parse_encoder_spec(bad, small_model)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dyntrans", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "decode", "evaluate", "bench", "export"):
        assert cmd in out.stdout
