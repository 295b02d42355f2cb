import csv

import numpy as np
import pytest

from codaseg.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from codaseg.network import checkpoint_meta, load_checkpoint

TINY = """
scene.image_size = 32, 32
data.n_source = 6
data.n_target = 6
train.pretrain_iters = 6
train.contrast_pretrain_iters = 3
train.head_finetune_epochs = 1
train.selftrain_iters = 4
train.period = 2
train.log_every = 2
train.crop_size = 16
train.batch_size = 4
train.scales = 1.0
train.k_batch = 8
train.bank_capacity = 8
aug.crop_size = 16
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY, encoding="utf-8")
    assert main(["gen-data", "--config", str(d / "tiny.cfg"), "--seed", "2", "--out", str(d / "data")]) == EXIT_OK
    assert main(["pretrain", "--data", str(d / "data"), "--config", str(d / "tiny.cfg"),
                 "--out", str(d / "pre")]) == EXIT_OK
    return d


def test_gen_data_writes_containers(work):
    names = {p.name for p in (work / "data").iterdir()}
    assert {"source_images.cdat", "source_labels.cdat", "target_images.cdat", "target_eval_labels.cdat"} <= names


def test_pretrain_checkpoint_meta(work):
    meta = checkpoint_meta(work / "pre")
    assert meta["stage"] == "pretrain" and int(meta["seed"]) == 2


def test_selftrain_eval_diagnose(work, capsys):
    cfg, data = str(work / "tiny.cfg"), str(work / "data")
    assert main(["selftrain", "--data", data, "--init", str(work / "pre"), "--config", cfg,
                 "--out", str(work / "st")]) == EXIT_OK
    rows = list(csv.reader(open(work / "st" / "metrics.csv")))
    assert rows[0] == ["iter", "loss", "ce_src", "ce_tgt", "l_in", "l_cross", "miou_tgt",
                       "pseudo_coverage", "expanded_px"]
    assert [r[0] for r in rows[1:]] == ["0", "2", "3"]
    assert main(["eval", "--data", data, "--ckpt", str(work / "st"), "--split", "target",
                 "--out", str(work / "iou.csv")]) == EXIT_OK
    assert "target mIoU" in capsys.readouterr().out
    iou_rows = list(csv.reader(open(work / "iou.csv")))
    assert iou_rows[0] == ["class", "iou", "included"] and iou_rows[-1][0] == "mean"
    assert main(["diagnose", "--data", data, "--ckpt", str(work / "st"), "--out", str(work / "dist.csv"),
                 "--samples-per-class", "3"]) == EXIT_OK
    assert list(csv.reader(open(work / "dist.csv")))[0] == ["class", "distance"]
    emb = list(csv.reader(open(work / "dist_embeddings.csv")))
    assert emb[0][:3] == ["domain", "class", "e0"] and len(emb) > 1


def test_selftrain_is_reproducible_and_ablations_differ(work):
    cfg, data, init = str(work / "tiny.cfg"), str(work / "data"), str(work / "pre")
    outs = {}
    for name, extra in (("a", []), ("b", []), ("c", ["--ablate", "no-contrast", "--ablate", "no-expand"])):
        assert main(["selftrain", "--data", data, "--init", init, "--config", cfg,
                     "--out", str(work / name)] + extra) == EXIT_OK
        p = load_checkpoint(work / name)
        outs[name] = b"".join(t.data.tobytes() for t in p.values())
    assert outs["a"] == outs["b"]
    assert outs["a"] != outs["c"]
    assert checkpoint_meta(work / "c")["ablate"] == "no-contrast,no-expand"


def test_ablation_redoing_pretraining(work):
    assert main(["selftrain", "--data", str(work / "data"), "--init", str(work / "pre"),
                 "--config", str(work / "tiny.cfg"), "--out", str(work / "nt"), "--ablate", "no-transfer"]) == EXIT_OK


def test_usage_errors(work, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["selftrain", "--data", str(work / "data"), "--init", "x", "--out", "y", "--ablate", "no-such"])
    assert info.value.code == EXIT_USAGE
    assert main(["eval", "--data", str(tmp_path / "missing"), "--ckpt", str(work / "pre"),
                 "--out", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_config_errors(work, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.unknown_key = 1\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    bad.write_text("scene.num_classes = 2\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_numeric_failure(work, tmp_path):
    from codaseg.network import save_checkpoint
    p = load_checkpoint(work / "pre")
    p["classifier.conv.b"].data[:] = np.nan
    save_checkpoint(p, tmp_path / "nan", {"stage": "pretrain", "seed": 2})
    code = main(["selftrain", "--data", str(work / "data"), "--init", str(tmp_path / "nan"),
                 "--config", str(work / "tiny.cfg"), "--out", str(tmp_path / "st")])
    assert code == EXIT_NUMERIC
    assert (tmp_path / "st" / "last_good").is_dir()
