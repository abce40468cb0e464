import json
from pathlib import Path

import pytest

from patchsdf.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from patchsdf.config import from_ini

TINY = """
[run]
output_dir = {root}/runs
master_seed = 3
ablation_datasets = no-noise
eval_samples = 500

[dataset]
dataset_dir = {root}/data
num_shapes = 2
shape_kinds = sphere,box
mesh_resolution = 20
variants = var-noise,no-noise
image_width = 40
image_height = 32

[model]
n_d = 8
n_s = 16
encoder_widths = 4,4,4,8,16
decoder_widths = 16,8,8

[train]
epochs = 2
queries_per_shape = 48
batch_size = 16

[grid]
resolution = 20
"""


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.ini"
    cfg.write_text(TINY.format(root=root))
    assert main(["--config", str(cfg), "make-dataset"]) == EXIT_OK
    assert main(["--config", str(cfg), "train"]) == EXIT_OK
    return root, cfg


def test_print_config_roundtrip(capsys, tmp_path):
    assert main(["print-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "[model]" in text and "n_d = 300" in text
    (tmp_path / "c.ini").write_text(text)
    assert main(["--config", str(tmp_path / "c.ini"), "print-config"]) == EXIT_OK
    assert capsys.readouterr().out == text


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["train", "--variant", "nope"]) == EXIT_USAGE
    assert main(["--config", str(tmp_path / "missing.ini"), "print-config"]) == EXIT_USAGE
    (tmp_path / "bad.ini").write_text("[train]\nepoch = 3\n")
    assert main(["--config", str(tmp_path / "bad.ini"), "print-config"]) == EXIT_USAGE
    capsys.readouterr()


def test_train_without_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[dataset]\ndataset_dir = {tmp_path}/none\n[run]\noutput_dir = {tmp_path}/runs\n")
    assert main(["--config", str(cfg), "train"]) == EXIT_DATA
    assert "make-dataset" in capsys.readouterr().err


def test_dataset_files(project):
    root, _ = project
    data = root / "data"
    assert len(list((data / "clouds").rglob("*.ply"))) == 4
    assert len(list((data / "queries").glob("*.bin"))) == 2
    assert len((data / "manifest.txt").read_text().splitlines()) == 4


def test_make_dataset_rerun_same_manifest(project, tmp_path):
    root, cfg = project
    text = cfg.read_text().replace(f"{root}/data", f"{tmp_path}/data2")
    (tmp_path / "c.ini").write_text(text)
    assert main(["--config", str(tmp_path / "c.ini"), "make-dataset"]) == EXIT_OK
    assert (tmp_path / "data2" / "manifest.txt").read_bytes() == (root / "data" / "manifest.txt").read_bytes()
    # parallel workers produce the same bytes
    (tmp_path / "c3.ini").write_text(text.replace(f"{tmp_path}/data2", f"{tmp_path}/data3"))
    assert main(["--config", str(tmp_path / "c3.ini"), "--workers", "2", "make-dataset"]) == EXIT_OK
    for f in ("manifest.txt", "clouds/var-noise/proc_001.ply", "queries/proc_000.bin"):
        assert (tmp_path / "data3" / f).read_bytes() == (root / "data" / f).read_bytes()


def test_train_outputs_and_resume(project, capsys):
    root, cfg = project
    run = root / "runs" / "e_vanilla"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    log = [json.loads(s) for s in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    before = (run / "checkpoints" / "epoch_0002.ckpt").read_bytes()
    # idempotent: a finished run is not retrained
    assert main(["--config", str(cfg), "train"]) == EXIT_OK
    assert (run / "checkpoints" / "epoch_0002.ckpt").read_bytes() == before
    capsys.readouterr()


def test_uniform_variant_changes_only_subsampling(project):
    root, cfg = project
    assert main(["--config", str(cfg), "train", "--variant", "e_uniform"]) == EXIT_OK

    def model_section(variant):
        return from_ini((root / "runs" / variant / "config.ini").read_text()).effective_model()

    a, b = model_section("e_vanilla"), model_section("e_uniform")
    diff = {k for k in a.__dataclass_fields__ if getattr(a, k) != getattr(b, k)}
    assert diff == {"subsample_mode"}


def test_reconstruct_and_eval(project, capsys):
    root, cfg = project
    out = root / "recon"
    assert main(["--config", str(cfg), "reconstruct", "--dataset-variant", "no-noise", "--out", str(out)]) == EXIT_OK
    meshes = sorted(p.name for p in out.glob("*.ply"))
    assert meshes == ["proc_000.ply", "proc_001.ply"]
    stats = (out / "proc_000.stats").read_text()
    assert "evaluated_fraction=" in stats
    table = root / "eval" / "table.csv"
    assert main(["--config", str(cfg), "eval", "--recon-dir", str(out), "--gt-dir", str(root / "data" / "meshes"),
                 "--out", str(table), "--method", "mine", "--dataset", "no-noise"]) == EXIT_OK
    lines = table.read_text().splitlines()
    assert lines[0] == "dataset,mine_abs,mine_rel" and lines[1].endswith(",1.00")
    recs = [json.loads(s) for s in table.with_suffix(".jsonl").read_text().splitlines()]
    assert [r["shape_id"] for r in recs] == ["proc_000", "proc_001"]
    capsys.readouterr()


def test_reconstruct_explicit_cloud_dense(project, capsys):
    root, cfg = project
    cloud = root / "data" / "clouds" / "no-noise" / "proc_000.ply"
    out = root / "recon_dense"
    assert main(["--config", str(cfg), "reconstruct", str(cloud), "--dense", "--grid-res", "12", "--out", str(out)]) == 0
    assert "evaluated_fraction=1.0" in (out / "proc_000.stats").read_text()
    capsys.readouterr()


def test_missing_checkpoint(project, capsys, tmp_path):
    _, cfg = project
    code = main(["--config", str(cfg), "reconstruct", "--checkpoint", str(tmp_path / "nope.ckpt")])
    assert code == EXIT_DATA
    code = main(["--config", str(cfg), "reconstruct", "--variant", "k_small"])
    assert code == EXIT_DATA
    assert "checkpoint" in capsys.readouterr().err


def test_missing_cloud(project, capsys, tmp_path):
    _, cfg = project
    assert main(["--config", str(cfg), "reconstruct", str(tmp_path / "gone.ply")]) == EXIT_DATA
    capsys.readouterr()


def test_ablate_vanilla_only(project, capsys):
    root, cfg = project
    assert main(["--config", str(cfg), "ablate", "--variants", "e_vanilla"]) == EXIT_OK
    table = (root / "runs" / "ablation" / "table.csv").read_text().splitlines()
    assert table[0] == "dataset,e_vanilla_abs,e_vanilla_rel"
    assert [line.split(",")[0] for line in table[1:]] == ["no-noise", "average"]
    assert all(line.endswith(",1.00") for line in table[1:])
    times = json.loads((root / "runs" / "ablation" / "epoch_times.json").read_text())
    assert set(times) == {"e_vanilla"}
    capsys.readouterr()


def test_ablate_layout(project, capsys):
    root, cfg = project
    assert main(["--config", str(cfg), "ablate", "--variants", "e_no_QSTN"]) == EXIT_OK
    table = (root / "runs" / "ablation" / "table.csv").read_text().splitlines()
    # e_vanilla is always included as the baseline column
    assert table[0] == "dataset,e_vanilla_abs,e_vanilla_rel,e_no_QSTN_abs,e_no_QSTN_rel"
    capsys.readouterr()
