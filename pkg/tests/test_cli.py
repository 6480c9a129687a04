import pytest

from maskr import dsp
from maskr.cli import build_parser, file_sha256, main
from maskr.codec import read_codegram
from maskr.masked_lm import RestorerModel
from maskr.metrics import read_csv

CONFIG = """\
data_dir = data
codec_path = ck/codec.mskr
model_path = ck/model.mskr
out_dir = rep
num_train = 4
num_dev = 0
num_test = 2
clip_seconds = 1.0
window = 256
hop = 64
codec_iterations = 10
iterations = 3
griffin_lim_iters = 4
window_seconds = 1.0
"""


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(CONFIG)
    mp = pytest.MonkeyPatch()
    mp.chdir(d)
    assert run("synth-data", "--config", "run.cfg") == 0
    assert run("train-codec", "--config", "run.cfg") == 0
    assert run("train-restorer", "--config", "run.cfg", "--steps", "3", "--batch-size", "2") == 0
    yield d
    mp.undo()


def test_pipeline_outputs(workdir):
    for name in ("data/train.jsonl", "data/test.jsonl", "ck/codec.mskr", "ck/model.mskr",
                 "rep/train_loss.csv", "rep/train_loss.png"):
        assert (workdir / name).exists(), name
    cols, rows = read_csv(workdir / "rep/train_loss.csv")
    assert cols == ["step", "loss"] and len(rows) == 3


def test_evaluate_writes_reports(workdir):
    assert run("evaluate", "--config", "run.cfg") == 0
    cols, rows = read_csv(workdir / "rep/eval.csv")
    assert len(rows) == 2 and "lsd_restored" in cols and "acc_4" in cols
    _, summary = read_csv(workdir / "rep/eval_summary.csv")
    assert [r["subset"] for r in summary][0] == "all"
    assert (workdir / "rep/eval.png").stat().st_size > 0


def test_restore_keeps_duration(workdir):
    src = workdir / "data/test/corrupted_00000.wav"
    assert run("restore", "--config", "run.cfg", str(src), "out.wav", "--codegram", "out.cgrm") == 0
    a, b = dsp.read_wav(src), dsp.read_wav(workdir / "out.wav")
    assert a.sample_rate == b.sample_rate
    assert abs(len(a) - len(b)) <= 64
    cg = read_codegram(workdir / "out.cgrm")
    assert cg.tokens.shape == (4, dsp.num_frames(len(a), 64))


def test_bench_and_sweep(workdir):
    assert run("bench-decode", "--config", "run.cfg", "--lengths", "0.2", "--repeats", "1",
               "--decoders", "parallel,hierarchical", "--no-figures") == 0
    _, rows = read_csv(workdir / "rep/bench.csv")
    assert [r["decoder"] for r in rows] == ["parallel", "hierarchical"]
    assert all(r["sweeps"] == r["expected_sweeps"] for r in rows)
    assert run("sweep-guidance", "--config", "run.cfg", "--grid", "0,1", "--limit", "1") == 0
    _, rows = read_csv(workdir / "rep/guidance.csv")
    assert [r["w"] for r in rows] == [0, 1]
    assert (workdir / "rep/guidance.png").exists()


def test_untrained_checkpoint_reloads(workdir):
    assert run("train-restorer", "--config", "run.cfg", "--steps", "0", "--model", "ck/zero.mskr") == 0
    m = RestorerModel.load(workdir / "ck/zero.mskr")
    assert m.cfg.hop == 64 and m.cfg.window == 256


def test_training_is_reproducible(workdir):
    args = ("train-restorer", "--config", "run.cfg", "--steps", "2", "--batch-size", "2")
    assert run(*args, "--model", "ck/a.mskr") == 0
    assert run(*args, "--model", "ck/b.mskr") == 0
    assert file_sha256(workdir / "ck/a.mskr") == file_sha256(workdir / "ck/b.mskr")


def test_missing_checkpoint_fails_cleanly(workdir, capsys):
    assert run("evaluate", "--config", "run.cfg", "--model", "nope.mskr") != 0
    assert "train-restorer" in capsys.readouterr().err


def test_bad_preset_fails(workdir, capsys):
    assert run("train-codec", "--config", "run.cfg", "--preset", "huge") != 0
    assert "preset" in capsys.readouterr().err


def test_parser_lists_all_commands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"synth-data", "train-codec", "train-restorer", "restore", "evaluate",
                        "bench-decode", "sweep-guidance"}
