import numpy as np

from asrprobe import audio, cli, pipeline


def write_config(path, seed=7, extra=""):
    path.write_text(f"""
[run]
seed = {seed}
models = baseline
arch = pure-recurrent
layers = blstm1, blstm5
conditions = clean, snr0
hidden = 16

[corpus]
n_speakers = 3
train_utts = 3
eval_utts = 2
tokens_per_utt = 3
vocab_size = 4

[asr]
epochs = 2
lr = 3e-3

[probe]
epochs = 2

[eval]
pairs_per_class = 3
n_triplets = 2
gl_iters = 4
{extra}
""")


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        rc = cli.main(["synth-corpus", "--config", str(tmp_path / "none.ini"),
                       "--out", str(tmp_path / "run")])
        assert rc == cli.EXIT_CONFIG

    def test_invalid_config_collects_all_problems(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[run]\nmodels = ghost\nhidden = many\n")
        rc = cli.main(["synth-corpus", "--config", str(cfg),
                       "--out", str(tmp_path / "run")])
        assert rc == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "seed" in err and "hidden" in err

    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        rc = cli.main(["eval-eer", "--config", str(cfg),
                       "--out", str(tmp_path / "run")])
        assert rc == cli.EXIT_MISSING
        assert "synth-corpus" in capsys.readouterr().err

    def test_eval_before_reconstruct(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        out = str(tmp_path / "run")
        assert cli.main(["synth-corpus", "--config", str(cfg), "--out", out]) == 0
        rc = cli.main(["eval-stoi", "--config", str(cfg), "--out", out])
        assert rc == cli.EXIT_MISSING
        assert "reconstruct" in capsys.readouterr().err

    def test_lock_refused(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        out = tmp_path / "run"
        out.mkdir()
        (out / "run.lock").write_text("123")
        rc = cli.main(["synth-corpus", "--config", str(cfg), "--out", str(out)])
        assert rc == cli.EXIT_CONFIG
        assert "lock" in capsys.readouterr().err


class TestStages:
    def test_run_all_and_idempotence(self, tmp_path):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        out = str(tmp_path / "run")
        assert cli.main(["run-all", "--config", str(cfg), "--out", out]) == 0
        hashes1 = (tmp_path / "run" / "hashes.json").read_bytes()
        assert cli.main(["run-all", "--config", str(cfg), "--out", out,
                         "--verify"]) == 0
        assert (tmp_path / "run" / "hashes.json").read_bytes() == hashes1

    def test_report_after_run(self, tmp_path, capsys):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        out = str(tmp_path / "run")
        assert cli.main(["run-all", "--config", str(cfg), "--out", out]) == 0
        assert cli.main(["report", "--config", str(cfg), "--out", out]) == 0
        assert "eer_trend" in capsys.readouterr().out

    def test_stage_by_stage_matches_run_all(self, tmp_path):
        cfg = tmp_path / "c.ini"
        write_config(cfg)
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert cli.main(["run-all", "--config", str(cfg), "--out", a]) == 0
        for name, _ in pipeline.STAGES:
            assert cli.main([name, "--config", str(cfg), "--out", b]) == 0, name
        assert cli.main(["report", "--config", str(cfg), "--out", b]) == 0
        ra = (tmp_path / "a" / "eval" / "report.csv").read_bytes()
        rb = (tmp_path / "b" / "eval" / "report.csv").read_bytes()
        assert ra == rb


class TestExportSpectrogram:
    def test_pgm_written(self, tmp_path):
        t = np.arange(8000) / 16000
        w = audio.Waveform(0.4 * np.sin(2 * np.pi * 700 * t), 16000)
        wav = tmp_path / "t.wav"
        audio.write_wav(w, wav)
        pgm = tmp_path / "t.pgm"
        assert cli.main(["export-spectrogram", str(wav), str(pgm)]) == 0
        assert pgm.read_bytes().startswith(b"P5\n")
