import numpy as np
import pytest
from PIL import Image

from vct.checkpoint import Checkpoint
from vct.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from vct.config import ExperimentConfig, parse_kv

TINY = """
# tiny smoke configuration
dataset = minishapes
image_size = 16
patch = 8
dim = 16
enc_depth = 1
dec_depth = 1
heads = 2
num_concepts = 4
batch_size = 8
steps = 6
warmup_steps = 2
checkpoint_every = 3
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY)
    cfg = ExperimentConfig.from_dict(parse_kv(TINY))
    assert main(["train", "--config", str(cfg_path), "--out", str(root / "runs"), "--quiet"]) == EXIT_OK
    return root, cfg_path, cfg, root / "runs" / f"{cfg.hash()}-0-latest.ckpt"


def test_train_outputs_embed_hash(run):
    root, _, cfg, ckpt = run
    log = (root / "runs" / f"{cfg.hash()}-0-train.csv").read_text().splitlines()
    assert log[0] == f"# config_hash = {cfg.hash()}"
    assert log[1].split(",")[:5] == ["step", "rec", "dis", "total", "swap_accuracy"]
    assert len(log) == 2 + 6
    loaded = Checkpoint.load(ckpt)
    assert loaded.step == 6 and loaded.config_hash == cfg.hash()


def test_train_steps_zero_and_set_override(tmp_path, run):
    _, cfg_path, cfg, _ = run
    assert main(["train", "--config", str(cfg_path), "--steps", "0", "--set", "seed=5",
                 "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    other = cfg.replace(steps=0, seed=5)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == [f"{other.hash()}-5-latest.ckpt", f"{other.hash()}-5-train.csv"]
    assert Checkpoint.load(tmp_path / files[0]).step == 0


def test_train_usage_errors(tmp_path, run):
    _, cfg_path, _, _ = run
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--config", str(cfg_path), "--set", "steps", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["no-such-verb"])
    assert exc.value.code == EXIT_USAGE


def test_resume_rejects_other_config_unless_forced(tmp_path, run):
    _, cfg_path, _, ckpt = run
    args = ["train", "--config", str(cfg_path), "--set", "lr=0.01", "--resume", str(ckpt),
            "--out", str(tmp_path), "--quiet"]
    assert main(args) == EXIT_USAGE
    assert main(args + ["--force", "--until", "7", "--steps", "8"]) == EXIT_OK


def test_eval_twice_identical(tmp_path, run):
    _, _, cfg, ckpt = run
    args = ["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--fast", "--swap-images", "64"]
    assert main(args) == EXIT_OK
    report = tmp_path / f"{cfg.hash()}-0-eval.txt"
    first = report.read_text()
    assert main(args) == EXIT_OK
    assert report.read_text() == first
    assert cfg.hash() in first
    for key in ("rec_mse", "swap_accuracy", "factorvae", "betavae", "mig", "dci"):
        assert key in first


def test_eval_and_decompose_dataset_mismatch(tmp_path, run):
    _, _, _, ckpt = run
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", "miniscene", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["decompose", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == EXIT_USAGE


def test_swap_grid_layout_and_names(tmp_path, run):
    _, _, cfg, ckpt = run
    pre = f"{cfg.hash()}-0"
    assert main(["swap", "--checkpoint", str(ckpt), "--pairs", "3:3,5:9,11:2", "--slots", "0,2",
                 "--out", str(tmp_path)]) == EXIT_OK
    for i, j in ((3, 3), (5, 9), (11, 2)):
        for slot in (0, 2):
            assert (tmp_path / f"{pre}-swap-{i}-{j}-{slot}.png").exists()
    grid = np.asarray(Image.open(tmp_path / f"{pre}-swap-grid.png"))
    assert grid.shape == (2 * 17 + 1, 3 * 17 + 1, 3)

    # swapping an image with itself reproduces its reconstruction
    from vct.manipulation import decode, encode
    from vct.model import to_images
    from vct.train import build_dataset, load_model
    from vct.datasets import to_uint8

    model, _, _ = load_model(ckpt)
    img = build_dataset(cfg).render_index(np.array([3]))[0]
    recon = to_uint8(to_images(decode(model, encode(model, img)))[0])
    assert np.array_equal(np.asarray(Image.open(tmp_path / f"{pre}-swap-3-3-0.png")), recon)


def test_swap_and_interp_index_errors(tmp_path, run):
    _, _, _, ckpt = run
    assert main(["swap", "--checkpoint", str(ckpt), "--pairs", "0:99999", "--slots", "0",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["swap", "--checkpoint", str(ckpt), "--pairs", "0:1", "--slots", "4",
                 "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["interp", "--checkpoint", str(ckpt), "--index", "-1", "--target", "2", "--slot", "0",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_interp_strip(tmp_path, run):
    _, _, cfg, ckpt = run
    assert main(["interp", "--checkpoint", str(ckpt), "--index", "1", "--target", "2", "--slot", "1",
                 "--frames", "5", "--out", str(tmp_path)]) == EXIT_OK
    strip = np.asarray(Image.open(tmp_path / f"{cfg.hash()}-0-interp-1-2-1.png"))
    assert strip.shape == (17 + 1, 5 * 17 + 1, 3)


def test_render_dataset(tmp_path, run):
    _, cfg_path, cfg, _ = run
    out = tmp_path / "data"
    assert main(["render-dataset", "--config", str(cfg_path), "--count", "20", "--out", str(out)]) == EXIT_OK
    assert f"config_hash = {cfg.hash()}" in (out / "manifest.txt").read_text()
    assert (out / "images.bin").stat().st_size == 20 * 16 * 16 * 3
    assert (out / f"{cfg.hash()}-0-preview.png").exists()


def test_decompose_on_scene_checkpoint(tmp_path):
    cfg_path = tmp_path / "scene.cfg"
    cfg_path.write_text(TINY.replace("minishapes", "miniscene").replace("steps = 6", "steps = 2"))
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    cfg = ExperimentConfig.from_dict(parse_kv(cfg_path.read_text()))
    ckpt = tmp_path / f"{cfg.hash()}-0-latest.ckpt"
    assert main(["decompose", "--checkpoint", str(ckpt), "--count", "20", "--overlays", "2",
                 "--out", str(tmp_path)]) == EXIT_OK
    pre = f"{cfg.hash()}-0"
    text = (tmp_path / f"{pre}-decompose.txt").read_text()
    assert "ari" in text and "msc" in text
    assert np.asarray(Image.open(tmp_path / f"{pre}-mask-1.png")).shape == (16, 16)
    assert (tmp_path / f"{pre}-overlay-0.png").exists()


def test_gradcheck_passes(tmp_path):
    assert main(["gradcheck", "--probes", "2", "--out", str(tmp_path)]) == EXIT_OK
    [report] = tmp_path.glob("*-gradcheck.txt")
    assert report.read_text().startswith("config_hash = ")


def test_numeric_failure_exit_code(tmp_path, run, monkeypatch):
    _, cfg_path, _, _ = run
    import vct.cli
    from vct.nn import NumericError

    def boom(self, until=None, log=None):
        raise NumericError("non-finite loss at step 0")

    monkeypatch.setattr(vct.cli.Trainer, "run", boom)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--quiet"]) == EXIT_NUMERIC
