import json
import shutil

import numpy as np
import pytest

from modalsurv.cli import ConfigError, load_config, main
from modalsurv.datamodel import SurvivalRecord, read_labels, read_modality_table, write_labels
from modalsurv.bundle import load_bundle
from modalsurv.pipeline import ensemble_predict, read_predictions
from modalsurv.survcore import c_index

FAST_TRAIN = """
[train]
K = 8
embed_dim = 16
hidden_widths = 16
max_epochs = 25
patience = 5
"""


def write_config(path, body):
    path.write_text(body)
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = write_config(root / "synth.ini", "[synth]\nn = 120\nseed = 3\noutput = data\n")
    assert main(["synth", cfg]) == 0
    return root / "data"


def task1_config(tmp_path, data, seeds=2, extra=""):
    return write_config(tmp_path / "run.ini", f"""
[paths]
labels = {data}/labels.csv
clinical_raw = {data}/clinical
output = out

[features]
wsi = {data}/wsi.csv
mri = {data}/mri.csv

[run]
profile = task1
k = 3
seeds = {seeds}
{extra}
{FAST_TRAIN}
""")


class TestConfig:
    def test_all_errors_reported(self, tmp_path):
        cfg = write_config(tmp_path / "bad.ini", "[run]\nk = x\nbogus = 1\n[train]\nlr = 3\n[nope]\na = 1\n")
        with pytest.raises(ConfigError) as info:
            load_config(cfg)
        msg = str(info.value)
        for fragment in ("bogus", "[train] unknown key 'lr'", "[nope]", "k:"):
            assert fragment in msg

    def test_exit_code_validation(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.ini", "[run]\nbogus = 1\n")
        assert main(["train", cfg]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_missing_paths(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[paths]\nlabels = nope.csv\n[run]\nprofile = task1\n")
        assert main(["prep", cfg]) == 1

    def test_profiles(self, tmp_path):
        assert load_config(write_config(tmp_path / "a.ini", "[run]\nprofile = task3\n")).modalities == (
            "clinical", "rna", "wsi")
        rc = load_config(write_config(tmp_path / "b.ini", "[run]\nprofile = task1\n[train]\nhidden_widths = 4, 2\n"))
        assert rc.modalities == ("clinical", "mri", "wsi") and rc.train.hidden_widths == (4, 2)
        assert rc.train.learning_rate == 1e-3 and rc.train.K == 30


class TestPrep:
    def test_deterministic_and_exclusions(self, tmp_path, synth_dir):
        data = tmp_path / "data"
        shutil.copytree(synth_dir, data)
        victim = sorted((data / "clinical").glob("*.json"))[0]
        obj = json.loads(victim.read_text())
        obj.pop(sorted(obj)[0])
        victim.write_text(json.dumps(obj))
        cfg = task1_config(tmp_path, data)
        assert main(["prep", cfg]) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "out" / "prep").iterdir()}
        assert main(["prep", cfg]) == 0
        second = {p.name: p.read_bytes() for p in (tmp_path / "out" / "prep").iterdir()}
        assert first == second
        report = (tmp_path / "out" / "prep" / "exclusions.txt").read_text()
        assert victim.stem in report
        for name in ("clinical.csv", "wsi.csv", "mri.csv", "labels.csv"):
            ids = read_modality_table(tmp_path / "out" / "prep" / name).ids if name != "labels.csv" else [
                r.patient_id for r in read_labels(tmp_path / "out" / "prep" / name)]
            assert victim.stem not in ids
            assert len(ids) == 119

    def test_task3_pca(self, tmp_path, synth_dir):
        rng = np.random.default_rng(0)
        ids = [r.patient_id for r in read_labels(synth_dir / "labels.csv")]
        x = rng.normal(size=(len(ids), 300))
        with open(tmp_path / "rna.csv", "w") as fh:
            fh.write("patient_id," + ",".join(f"g{j}" for j in range(300)) + "\n")
            for pid, row in zip(ids, x):
                fh.write(pid + "," + ",".join(repr(float(v)) for v in row) + "\n")
        cfg = write_config(tmp_path / "t3.ini", f"""
[paths]
labels = {synth_dir}/labels.csv
clinical_raw = {synth_dir}/clinical
[features]
rna = rna.csv
wsi = {synth_dir}/wsi.csv
[run]
profile = task3
pca_k = 100
""")
        assert main(["prep", cfg]) == 0
        prep = tmp_path / "out" / "prep"
        assert read_modality_table(prep / "rna.csv").dim == 100
        assert read_modality_table(prep / "rna_raw.csv").dim == 300
        assert json.loads((prep / "alignment.json").read_text())["pca"]["rna"] == {"k": 100, "input_dim": 300}


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    tmp = tmp_path_factory.mktemp("run")
    cfg = task1_config(tmp, synth_dir)
    for cmd in ("prep", "train", "predict"):
        assert main([cmd, cfg]) == 0
    return tmp, cfg


class TestTrainPredictEval:
    def test_bundle_contents(self, trained):
        tmp, _ = trained
        b = tmp / "out" / "bundle"
        manifest = json.loads((b / "manifest.json").read_text())
        assert len(manifest["members"]) == 6
        assert len(list((b / "models").glob("*.npy"))) == 6
        assert (b / "folds.csv").read_text().startswith("# k=3 seed=0")
        rows = (b / "results.csv").read_text().splitlines()
        assert rows[0] == "model,subset,mean_c,std_c,n_models"
        assert rows[1].startswith("coxph,clinical,") and rows[2].startswith("modalsurv,clinical+mri+wsi,")

    def test_rerun_identical(self, trained, tmp_path, synth_dir):
        tmp, _ = trained
        cfg = task1_config(tmp_path, synth_dir)
        for cmd in ("prep", "train", "predict"):
            assert main([cmd, cfg]) == 0
        m1 = json.loads((tmp / "out" / "bundle" / "manifest.json").read_text())
        m2 = json.loads((tmp_path / "out" / "bundle" / "manifest.json").read_text())
        assert m1["hashes"] == m2["hashes"]
        assert m1["summary"] == m2["summary"]
        assert (tmp / "out" / "predictions.csv").read_bytes() == (tmp_path / "out" / "predictions.csv").read_bytes()

    def test_in_sample_and_eval_delegation(self, trained, capsys):
        tmp, cfg = trained
        ids, _, risk, surv = read_predictions(tmp / "out" / "predictions.csv")
        recs = {r.patient_id: r for r in read_labels(tmp / "out" / "prep" / "labels.csv")}
        t = np.array([recs[p].time for p in ids])
        e = np.array([recs[p].event for p in ids])
        assert surv.shape[1] == 8
        expected = c_index(risk, t, e)
        assert expected > 0.5
        capsys.readouterr()
        assert main(["eval", cfg]) == 0
        assert f"C-index: {expected:.6f}" in capsys.readouterr().out

    def test_one_model_bundle_matches_direct(self, trained):
        tmp, _ = trained
        members, manifest = load_bundle(tmp / "out" / "bundle")
        m = members[0]
        feats = {mod: read_modality_table(tmp / "out" / "prep" / f"{mod}.csv").matrix(
            read_modality_table(tmp / "out" / "prep" / "clinical.csv").ids) for mod in manifest["modalities"]}
        direct = m.predict_pmf(feats)
        assert np.array_equal(ensemble_predict([m], feats).pmf, direct / direct.sum(axis=1, keepdims=True))

    def test_fold_only_ensemble(self, trained, tmp_path):
        tmp, cfg = trained
        text = open(cfg).read().replace("seeds = 2", "seeds = 2\nensemble = fold")
        cfg2 = write_config(tmp / "fold.ini", text + f"\n[predict]\noutput = {tmp_path}/p.csv\n")
        assert main(["predict", cfg2]) == 0
        assert (tmp_path / "p.csv").exists()

    def test_predict_missing_modality(self, trained, tmp_path, capsys):
        tmp, cfg = trained
        feat_dir = tmp_path / "feats"
        shutil.copytree(tmp / "out" / "prep", feat_dir)
        lines = (feat_dir / "wsi.csv").read_text().splitlines()
        dropped = lines[1].split(",")[0]
        (feat_dir / "wsi.csv").write_text("\n".join(lines[:1] + lines[2:]) + "\n")
        cfg2 = write_config(tmp / "miss.ini", open(cfg).read() + f"\n[predict]\nfeatures_dir = {feat_dir}\n"
                                                                f"output = {tmp_path}/p.csv\n")
        assert main(["predict", cfg2]) == 1
        assert dropped in capsys.readouterr().err


class TestEval:
    def _write_preds(self, path, ids, risk):
        with open(path, "w") as fh:
            fh.write("patient_id,expected_time_months,risk,S_0,S_1\n")
            for p, r in zip(ids, risk):
                fh.write(f"{p},{-float(r)!r},{float(r)!r},0.5,0.0\n")

    def _setup(self, tmp_path, n, rng, shuffle):
        t = rng.exponential(10, n) + 0.01
        e = rng.random(n) < 0.7
        ids = [f"P{i}" for i in range(n)]
        write_labels([SurvivalRecord(p, ti, ei) for p, ti, ei in zip(ids, t, e)], tmp_path / "labels.csv")
        risk = -t.copy()
        if shuffle:
            rng.shuffle(risk)
        self._write_preds(tmp_path / "pred.csv", ids, risk)
        return write_config(tmp_path / "e.ini", "[paths]\nlabels = labels.csv\n[eval]\npredictions = pred.csv\n")

    def test_perfect(self, tmp_path, rng, capsys):
        cfg = self._setup(tmp_path, 50, rng, shuffle=False)
        assert main(["eval", cfg]) == 0
        assert "C-index: 1.000000" in capsys.readouterr().out

    def test_permutation_null(self, tmp_path, rng, capsys):
        cfg = self._setup(tmp_path, 3000, rng, shuffle=True)
        assert main(["eval", cfg]) == 0
        c = float(capsys.readouterr().out.split()[1])
        assert abs(c - 0.5) < 0.02

    def test_undefined_is_numeric_error(self, tmp_path, capsys):
        write_labels([SurvivalRecord("A", 1.0, False), SurvivalRecord("B", 2.0, False)], tmp_path / "labels.csv")
        self._write_preds(tmp_path / "pred.csv", ["A", "B"], [1.0, 2.0])
        cfg = write_config(tmp_path / "e.ini", "[paths]\nlabels = labels.csv\n[eval]\npredictions = pred.csv\n")
        assert main(["eval", cfg]) == 2

    def test_missing_prediction(self, tmp_path):
        write_labels([SurvivalRecord("A", 1.0, True), SurvivalRecord("B", 2.0, False)], tmp_path / "labels.csv")
        self._write_preds(tmp_path / "pred.csv", ["A"], [1.0])
        cfg = write_config(tmp_path / "e.ini", "[paths]\nlabels = labels.csv\n[eval]\npredictions = pred.csv\n")
        assert main(["eval", cfg]) == 1
