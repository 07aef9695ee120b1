import numpy as np
import pytest

from redcmp.artifacts import (
    RunConfig,
    cell_dir,
    curves_svg,
    default_seq_lens,
    job_seeds,
    load_checkpoint,
    read_csv,
    read_hash,
    save_checkpoint,
    write_csv,
)
from redcmp.corpus import Subset
from redcmp.numerics import make_rng
from redcmp.red import Variant, red_forward, red_init


class TestSeqLens:
    def test_defaults(self):
        assert default_seq_lens("A") == (3, 5, 7, 8, 10, 15)
        assert default_seq_lens("B") == (4, 8, 11, 15, 30, 45)
        assert default_seq_lens("C") == (4, 8, 11, 15, 30, 45)


class TestRunConfig:
    def test_default_grid_size(self):
        cfg = RunConfig()
        assert len(cfg.cells()) == 5 * 2 * 18

    def test_text_round_trip(self):
        cfg = RunConfig(datasets=("B",), seq_lens={"B": (4, 8)}, seeds=(3,), hidden_dim=16, percentile=95.0)
        back = RunConfig.from_text(cfg.to_text())
        assert back == cfg
        assert back.hash == cfg.hash

    def test_parse_comments_and_shared_lens(self):
        text = """
        # tiny run
        datasets = A, C
        seq_lens = 3,8   # both sets
        seq_lens.C = 15
        epochs = 7
        learning_rate = 0.01
        stride = auto
        """
        cfg = RunConfig.from_text(text)
        assert cfg.datasets == ("A", "C")
        assert cfg.lens_for("A") == (3, 8)
        assert cfg.lens_for("C") == (15,)
        assert cfg.hyper.epochs == 7 and cfg.hyper.learning_rate == 0.01
        assert cfg.stride_for(8) == 8

    def test_hash_changes_with_content(self):
        assert RunConfig().hash != RunConfig(seeds=(1,)).hash
        assert RunConfig().hash == RunConfig().hash
        assert len(RunConfig().hash) == 16

    def test_replace_epochs(self):
        cfg = RunConfig().replace(epochs=0, seeds=(9,))
        assert cfg.hyper.epochs == 0 and cfg.seeds == (9,)

    @pytest.mark.parametrize(
        "text",
        [
            "unknown_key = 1",
            "datasets = X",
            "train_subsets = abnormal",
            "epochs = -1",
            "hidden_dim = 0",
            "percentile = 0",
            "seq_lens = 2000",
            "length = 3",
            "epochs = many",
            "no equals sign",
        ],
    )
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            RunConfig.from_text(text)

    def test_cell_paths_and_seeds(self, tmp_path):
        assert cell_dir(tmp_path, 2, Subset.NOISE, "C", 8) == tmp_path / "seed2" / "noise" / "set-C" / "L08"
        assert job_seeds(1, Subset.CLEAR, "A", 3) == job_seeds(1, Subset.CLEAR, "A", 3)
        assert job_seeds(1, Subset.CLEAR, "A", 3) != job_seeds(2, Subset.CLEAR, "A", 3)
        assert job_seeds(1, Subset.CLEAR, "A", 3) != job_seeds(1, Subset.NOISE, "A", 3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = make_rng(3)
        m = red_init(15, 8, 4, Variant.B, rng)
        for a in m.arrays():
            a += rng.normal(scale=1e-3, size=a.shape)
        save_checkpoint(tmp_path / "m.ckpt", m, {"epochs_completed": 0, "config_hash": "abc"})
        back, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta["config_hash"] == "abc" and meta["variant"] == "B"
        for a, b in zip(m.arrays(), back.arrays()):
            np.testing.assert_array_equal(a, b)
        for k in range(10):
            X = make_rng(100 + k).normal(size=(4, 15))
            np.testing.assert_array_equal(red_forward(m, X).probs, red_forward(back, X).probs)

    def test_named_arrays_in_file(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", red_init(5, 2, 3, Variant.C, make_rng(0)), {})
        text = (tmp_path / "m.ckpt").read_text()
        for name in ("encoder.W_i", "encoder.U_o", "decoder.b_f", "proj.W", "proj.b"):
            assert f"\n{name} " in text
        assert "format_version: 1\n" in text

    def test_version_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", red_init(5, 2, 3, Variant.C, make_rng(0)), {})
        p = tmp_path / "m.ckpt"
        p.write_text(p.read_text().replace("format_version: 1", "format_version: 9"))
        with pytest.raises(ValueError, match="format_version"):
            load_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", red_init(5, 2, 3, Variant.C, make_rng(0)), {})
        p = tmp_path / "m.ckpt"
        p.write_text("\n".join(p.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestCsvSvg:
    def test_csv_round_trip(self, tmp_path):
        write_csv(tmp_path / "x.csv", ["epoch", "loss"], [(1, "0.5"), (2, "0.25")], "deadbeef")
        raw = (tmp_path / "x.csv").read_bytes()
        assert raw.startswith(b"# config_hash: deadbeef\nepoch,loss\n1,0.5\n")
        assert b"\r" not in raw
        h, rows = read_csv(tmp_path / "x.csv")
        assert h == "deadbeef" and rows[1] == {"epoch": "2", "loss": "0.25"}
        assert read_hash(tmp_path / "x.csv") == "deadbeef"

    def test_svg(self):
        svg = curves_svg({"A": [3.0, 2.0, 1.0], "C": [2.0, 0.5, float("nan")]}, "set-A", "h1")
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert svg.count("<polyline") == 2
        assert ">epoch</text>" in svg and ">loss</text>" in svg
        assert "config_hash: h1" in svg

    def test_svg_empty_curve(self):
        assert "<polyline" not in curves_svg({"A": []}, "t", "h")
