import numpy as np
import pytest

from advlic.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main, resolve_config, write_reports
from advlic.codec import save_checkpoint
from advlic.config import Method
from advlic.data import write_png
from advlic.metrics import EvalRecord, records_from_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, quick_model):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    for sub, n in (("train", 4), ("test", 2)):
        (root / sub).mkdir()
        for i in range(n):
            base = rng.uniform(size=(1, 1, 3))
            img = np.clip(base + 0.1 * rng.normal(size=(64, 72, 3)), 0, 1)
            write_png(root / sub / f"{sub}{i}.png", img)
    save_checkpoint(quick_model, root / "model.ckpt")
    return root


def _attack_args(ws, out, *extra):
    return ["attack", "--model", str(ws / "model.ckpt"), "--test-dir", str(ws / "test"), "--out", str(out),
            "--max-steps", "3", *extra]


def test_missing_model_is_usage_error(workspace, capsys):
    assert main(["attack", "--test-dir", str(workspace / "test"), "--out", str(workspace / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "--model" in err


def test_unknown_flag_and_bad_choice(capsys):
    assert main(["attack", "--bogus"]) == EXIT_USAGE
    assert main(["attack", "--method", "cw"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_unknown_config_key_rejected(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epsilonn = 0.03\n")
    assert main(_attack_args(workspace, tmp_path / "o") + ["--config", str(cfg)]) == EXIT_USAGE


def test_defaults_per_method(workspace, tmp_path):
    parser = build_parser()
    pgd = resolve_config(parser.parse_args(_attack_args(workspace, tmp_path)[:-2] + ["--method", "pgd"])).attack()
    assert (pgd.max_steps, pgd.step_size, pgd.epsilon) == (40, 0.01, 0.03)
    fgsm = resolve_config(parser.parse_args(_attack_args(workspace, tmp_path)[:-2] + ["--method", "fgsm"])).attack()
    assert fgsm.method is Method.FGSM and fgsm.step_size == 1e-4 and fgsm.epsilon == pytest.approx(7 / 255)


def test_flags_override_config_file(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 3\nepsilon = 0.05\n")
    args = build_parser().parse_args(_attack_args(workspace, tmp_path) + ["--config", str(cfg), "--seed", "8"])
    resolved = resolve_config(args)
    assert resolved.seed == 8 and resolved.epsilon == 0.05


def test_attack_outputs_are_deterministic(workspace, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(_attack_args(workspace, out, "--seed", "5")) == EXIT_OK
    for name in ("records.csv", "aggregate.csv", "trajectories.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    heatmaps = sorted(p.name for p in (outs[0] / "heatmaps").iterdir())
    assert heatmaps == ["test0_quality_adv_grad.png", "test0_quality_grad.png",
                        "test1_quality_adv_grad.png", "test1_quality_grad.png"]
    assert "seed = 5" in (outs[0] / "config.txt").read_text()


def test_report_aggregates(workspace, tmp_path):
    out = tmp_path / "a"
    assert main(_attack_args(workspace, out, "--no-heatmaps")) == EXIT_OK
    assert main(["report", str(out / "records.csv"), "--out", str(tmp_path / "r")]) == EXIT_OK
    summary = (tmp_path / "r" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("method,target,variant,lam,count") and len(summary) == 2


def test_train_defend_transfer_run(workspace, tmp_path):
    common = ["--dataset-dir", str(workspace / "train"), "--patch-size", "32", "--epochs", "1",
              "--batch-size", "2", "--lambda", "low"]
    assert main(["train", "--out", str(tmp_path / "t"), *common]) == EXIT_OK
    ckpt = tmp_path / "t" / "model.ckpt"
    assert ckpt.is_file() and (tmp_path / "t" / "train_history.csv").is_file()
    assert main(["defend", "--model", str(ckpt), "--out", str(tmp_path / "d"), "--max-steps", "2",
                 *common]) == EXIT_OK
    assert (tmp_path / "d" / "defense.csv").read_text().count("\n") == 4
    assert main(["transfer", "--model", str(ckpt), "--test-dir", str(workspace / "test"),
                 "--out", str(tmp_path / "x"), "--target", "rate"]) == EXIT_OK
    assert (tmp_path / "x" / "transfer.csv").read_text().count("\n") == 3


def test_runtime_failure_exit_code(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(_attack_args(workspace, tmp_path / "o")[:2] + [str(bad)] + _attack_args(workspace, tmp_path / "o")[3:]) \
        == EXIT_RUNTIME
    assert "CheckpointError" in capsys.readouterr().err


def test_write_reports_single_record(tmp_path, rng):
    x = rng.uniform(size=(1, 3, 32, 32))
    rec = EvalRecord.build("one", x, np.clip(x + 0.05, 0, 1), np.clip(x - 0.2, 0, 1), 0.4, 0.9, 10.0,
                           method="pgd", target="quality", variant="factorized")
    write_reports([rec], tmp_path)
    assert records_from_csv((tmp_path / "records.csv").read_text()) == [rec]
    agg = (tmp_path / "aggregate.csv").read_text().splitlines()[1].split(",")
    assert float(agg[5]) == rec.bpp_change and float(agg[6]) == rec.psnr_change
    with pytest.raises(ValueError):
        write_reports([], tmp_path)
