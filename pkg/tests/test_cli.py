import subprocess
import sys

import numpy as np
import pytest

from noisyseg import report
from noisyseg.cli import main
from noisyseg.data.imageio import load_map_raw, load_mask, read_pixels
from noisyseg.data.manifest import read_pairs

FAST = ["--iterations", "15", "--batch-size", "8", "--learning-rate", "0.05"]
NET = ["--classes", "3", "--widths", "4,8,8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(d / "data"), "--classes", "3", "--counts", "24,8,8", "--seed", "2"]) == 0
    m = str(d / "data" / "manifest.tsv")
    assert main(["train-classifier", "--manifest", m, "--out", str(d / "cls.nsn"), *NET, *FAST]) == 0
    return d, m


class TestWorkflow:
    def test_attention_outputs(self, workdir):
        d, _ = workdir
        out = d / "att"
        img = d / "data" / "images" / "eval_00000.png"
        assert main(["attention", "--model", str(d / "cls.nsn"), "--image", str(img), "--class", "2",
                     "--out", str(out)]) == 0
        for name in ("forward", "backward_shallow", "backward_deep", "fused"):
            assert (out / f"{name}.png").is_file()
        fused = load_map_raw(out / "fused.npy")
        assert fused.shape == (64, 64) and fused.min() == 0.0 and fused.max() == 1.0
        assert load_map_raw(out / "forward.npy").shape == (8, 8)
        assert read_pixels(out / "fused.png").shape == (1, 64, 64)

    def test_pseudo_gt_then_train_then_finetune(self, workdir):
        d, m = workdir
        pg = d / "pg"
        assert main(["pseudo-gt", "--manifest", m, "--model", str(d / "cls.nsn"), "--out", str(pg),
                     "--segments", "16", "--segment-iterations", "2", "--palette"]) == 0
        pairs = read_pairs(pg / "pairs.tsv")
        assert len(pairs) == 24
        assert set(np.unique(load_mask(pairs[0][1]))) <= {-1, 0, 1, 2, 3}
        seg = d / "seg.nsn"
        assert main(["train-seg", "--pairs", str(pg / "pairs.tsv"), "--init-from", str(d / "cls.nsn"),
                     "--out", str(seg), *NET, *FAST]) == 0
        ft = d / "ft"
        assert main(["finetune", "--manifest", m, "--segmenter", str(seg), "--classifier", str(d / "cls.nsn"),
                     "--out", str(ft), "--mu", "0.0", "--augment", str(pg / "pairs.tsv"),
                     "--segments", "16", *FAST]) == 0
        assert (ft / "segmenter.nsn").is_file()
        assert (ft / "finetune.tsv").read_text().startswith("noisyseg-finetune\t1\n")
        assert main(["eval", "--model", str(ft / "segmenter.nsn"), "--manifest", m,
                     "--out", str(d / "eval.tsv")]) == 0
        metrics = report.read_metrics(d / "eval.tsv")
        assert metrics["images"] == "8" and 0.0 <= float(metrics["miou"]) <= 1.0

    def test_eval_identical_directories(self, workdir, capsys):
        d, _ = workdir
        truth = d / "data" / "truth"
        assert main(["eval", "--pred", str(truth), "--gt", str(truth)]) == 0
        lines = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
        assert lines["miou"] == "1.0"

    def test_filter_writes_reports(self, workdir):
        d, m = workdir
        out = d / "filter"
        assert main(["filter", "--manifest", m, "--out", str(out), "--filter-low", "0.0",
                     "--filter-high", "0.0", *NET, *FAST]) == 0
        lines = (out / "curation.tsv").read_text().splitlines()
        assert lines[0] == "noisyseg-curation\t1" and len(lines) == 5
        assert (out / "kept.tsv").is_file() and (out / "classifier.nsn").is_file()


class TestExitCodes:
    def test_missing_input(self, tmp_path, capsys):
        assert main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_pred_without_gt(self, tmp_path):
        assert main(["eval", "--pred", str(tmp_path)]) == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--bogus"])
        assert exc.value.code == 2

    def test_wrong_model_kind(self, workdir, tmp_path):
        d, m = workdir
        assert main(["eval", "--model", str(d / "cls.nsn"), "--manifest", m]) == 2

    def test_bad_config_value(self, tmp_path):
        assert main(["run-all", "--out", str(tmp_path), "--set", "delta_low=0.9"]) == 2

    def test_corrupt_checkpoint_fails_stage(self, tmp_path, capsys):
        bad = tmp_path / "bad.nsn"
        bad.write_bytes(b"garbage")
        img = tmp_path / "i.png"
        img.write_bytes(b"")
        assert main(["attention", "--model", str(bad), "--image", str(img), "--class", "1",
                     "--out", str(tmp_path / "o")]) == 1
        assert "stage 'attention' failed" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "noisyseg.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "run-all" in proc.stdout
