import numpy as np
import pandas as pd
import pytest
import yaml
from pydantic import ValidationError

from db.bundle_store import dump_bundle, load_bundle, save_bundle
from models.config import MiningMode, RunConfig, SynthSpec
from scripts.acdt import main
from workers.adapt import transform
from workers.benchmark import RESULT_COLUMNS, BenchmarkError, bench, load_manifest, sweep
from workers.dataset import Dataset, apply_scaler, build_joint_stack, write_csv
from workers.dp_miner import design_matrix
from workers.regress import ridge_baseline
from workers.pipeline import (
    PipelineError,
    bundle_components,
    emit_projection,
    generate_synthetic,
    load_inputs,
    predict_with_bundle,
    run_pipeline,
    synth,
    tca_predict,
    target_columns,
)


def _with(cfg: RunConfig, **transfer) -> RunConfig:
    return cfg.model_copy(update={"transfer": cfg.transfer.model_copy(update=transfer)})


def test_pipeline_reports_rmse(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    pred, score, bundle = run_pipeline(fast_config, train, test)
    assert pred.shape == (test.n,)
    assert score is not None and np.isfinite(score)
    assert sum(bundle.partition.sizes) == train.n
    assert bundle.affine_map.input_semantics == ["x1", "x2", "x3", "response"]
    assert len(bundle.ridge.weights) == fast_config.transfer.q


def test_reduces_to_feature_only_adaptation(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    cfg = _with(fast_config, alpha=0.0, beta=1.0, tau=0.0).model_copy(update={"mining": MiningMode.SINGLE})
    pred, _, bundle = run_pipeline(cfg, train, test)
    assert bundle.partition.sizes == [train.n]
    reduced, _ = tca_predict(train, test, cfg, jitter=bundle.affine_map.jitter)
    np.testing.assert_allclose(pred, reduced, atol=1e-8)


def test_empty_target_still_produces_bundle(two_domain_data, fast_config):
    train, _, _, _ = two_domain_data
    pred, score, bundle = run_pipeline(fast_config, train, None)
    assert pred.shape == (0,)
    assert score is None
    assert bundle.affine_map.q == 2

    empty = Dataset(features=np.zeros((0, train.p)), names=list(train.names), role="test")
    _, score, _ = run_pipeline(fast_config, train, empty)
    assert score is None


def test_reloaded_bundle_predicts_identically(tmp_path, two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    pred, score, bundle = run_pipeline(fast_config, train, test)
    loaded = load_bundle(str(save_bundle(bundle, str(tmp_path / "bundle.json"))))
    again, again_score = predict_with_bundle(loaded, test)
    np.testing.assert_allclose(again, pred, atol=1e-12)
    assert again_score == pytest.approx(score, abs=1e-12)


def test_pipeline_is_deterministic(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    first = run_pipeline(fast_config, train, test)
    second = run_pipeline(fast_config, train, test)
    np.testing.assert_array_equal(first[0], second[0])
    assert dump_bundle(first[2]) == dump_bundle(second[2])


def test_failures_name_their_stage(two_domain_data, fast_config, tmp_path):
    with pytest.raises(PipelineError) as exc:
        run_pipeline(RunConfig())
    assert exc.value.stage == "load"

    missing = fast_config.model_copy(update={"train": str(tmp_path / "nope.csv")})
    with pytest.raises(PipelineError) as exc:
        load_inputs(missing)
    assert exc.value.stage == "load"
    assert str(exc.value).startswith("[load]")

    train, _, test, _ = two_domain_data
    with pytest.raises(PipelineError) as exc:
        run_pipeline(_with(fast_config, q=9), train, test)
    assert exc.value.stage == "adapt"


def test_single_training_row_is_rejected(fast_config):
    one = Dataset(features=np.ones((1, 2)), names=["a", "b"], response=np.ones(1))
    with pytest.raises(PipelineError, match="at least 2"):
        run_pipeline(fast_config, one, None)


def test_load_inputs_splits_without_test_file(csv_pair, fast_config):
    train_path, _ = csv_pair
    cfg = fast_config.model_copy(update={"train": str(train_path), "split": 0.75})
    train, test = load_inputs(cfg)
    assert (train.n, test.n) == (60, 20)
    assert test.response is not None


def test_pca_projection_matches_svd(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    _, _, bundle = run_pipeline(fast_config, train, test)
    frame = emit_projection(bundle, train, test, "pca")

    scaler, _, _ = bundle_components(bundle)
    X = np.vstack([apply_scaler(scaler, train).features, apply_scaler(scaler, test).features])
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    oracle = Xc @ vt[:2].T
    # Component signs are arbitrary
    np.testing.assert_allclose(np.abs(frame[["x1", "x2"]].to_numpy()), np.abs(oracle), atol=1e-8)


def test_transferred_projection_matches_transform(tmp_path, two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    _, _, bundle = run_pipeline(fast_config, train, test)
    out = tmp_path / "proj.csv"
    frame = emit_projection(bundle, train, test, "transferred", str(out))

    scaler, affine, _ = bundle_components(bundle)
    stack = build_joint_stack(train, None, bundle.partition.labels, fast_config.transfer.alpha, scaler)
    expected = np.hstack([transform(affine, stack.train_columns()), transform(affine, target_columns(scaler, test))])
    np.testing.assert_allclose(frame[["x1", "x2"]].to_numpy(), expected[:2].T, atol=1e-12)

    m = len(bundle.partition.sizes)
    assert set(frame["domain"]) <= {str(k) for k in range(1, m + 1)} | {"target"}
    assert (frame["domain"] == "target").sum() == test.n
    assert list(pd.read_csv(out).columns) == ["x1", "x2", "domain"]


def test_noise_free_single_domain_recovers_coefficients():
    spec = SynthSpec(atoms=[[1.0, 2.0, -0.5]], sizes=[30], noise_std=0.0, seed=5)
    train, labels, test, _ = generate_synthetic(spec)
    coef, *_ = np.linalg.lstsq(design_matrix(train.features), train.response, rcond=None)
    np.testing.assert_allclose(coef, [1.0, 2.0, -0.5], atol=1e-10)
    assert test is None
    assert np.all(labels == 1)


def test_synth_writes_labelled_files(tmp_path, two_domain_spec):
    paths = synth(two_domain_spec, str(tmp_path / "synth"), "target")
    assert set(paths) == {"train", "labels", "test", "test_labels"}
    labels = pd.read_csv(paths["labels"])["domain"]
    assert labels.value_counts().sort_index().tolist() == two_domain_spec.sizes
    assert len(pd.read_csv(paths["test_labels"])) == two_domain_spec.test_size
    assert "target" in pd.read_csv(paths["train"]).columns


def _manifest(tmp_path, two_domain_spec, broken: bool = False) -> str:
    datasets = []
    for seed in (1, 2):
        train, _, _, _ = generate_synthetic(two_domain_spec.model_copy(update={"seed": seed, "test_size": 0}))
        path = tmp_path / f"synth{seed}.csv"
        write_csv(train, str(path))
        datasets.append({"name": f"synth{seed}", "train": str(path), "response": "y", "reference": {"RR": 0.5}})
    if broken:
        datasets.append({"name": "broken", "train": str(tmp_path / "missing.csv"), "response": "y"})
    manifest = {
        "defaults": {"split": 0.7, "sweeps": 30, "burn-in": 10, "q": 2, "knn": 5},
        "datasets": datasets,
    }
    path = tmp_path / "bench.yaml"
    path.write_text(yaml.safe_dump(manifest), encoding="utf-8")
    return str(path)


def test_bench_table_and_failure_isolation(tmp_path, two_domain_spec):
    entries = load_manifest(_manifest(tmp_path, two_domain_spec, broken=True))
    table = bench(entries, str(tmp_path / "out"))
    assert list(table.columns) == RESULT_COLUMNS
    assert len(table) == 3 * 3
    ok = table[table["dataset"] != "broken"]
    assert (ok["status"] == "ok").all()
    assert np.isfinite(ok["rmse"]).all()
    assert (table[table["dataset"] == "broken"]["status"] == "failed").all()
    assert ok[ok["method"] == "RR"]["reference"].tolist() == [0.5, 0.5]
    assert (tmp_path / "out" / "results.csv").exists()
    assert (tmp_path / "out" / "bundles" / "synth1_r0.json").exists()


def test_bench_reruns_are_byte_identical(tmp_path, two_domain_spec):
    entries = load_manifest(_manifest(tmp_path, two_domain_spec))
    bench(entries, str(tmp_path / "a"))
    bench(entries, str(tmp_path / "b"))
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    for name in ("synth1_r0.json", "synth2_r0.json"):
        assert (tmp_path / "a" / "bundles" / name).read_bytes() == (tmp_path / "b" / "bundles" / name).read_bytes()


def test_bench_repeats_write_summary(tmp_path, two_domain_spec):
    entries = load_manifest(_manifest(tmp_path, two_domain_spec))[:1]
    table = bench(entries, str(tmp_path / "out"), repeats=2, save_bundles=False)
    assert sorted(table["repeat"].unique().tolist()) == [0, 1]
    summary = pd.read_csv(tmp_path / "out" / "summary.csv")
    assert summary["n"].tolist() == [2, 2, 2]


def test_cli_exit_codes(tmp_path, csv_pair):
    train_path, test_path = csv_pair
    fast = ["--sweeps", "20", "--burn-in", "5", "--q", "2"]

    assert main(["synth", "--out", str(tmp_path / "s"), "--test-size", "5"]) == 0
    assert main(["run", "--train", str(train_path), "--test", str(test_path), "--out", str(tmp_path / "r")] + fast) == 0
    assert (tmp_path / "r" / "bundle.json").exists()
    assert main(["predict", "--bundle", str(tmp_path / "r" / "bundle.json"), "--test", str(test_path),
                 "--out", str(tmp_path / "p.csv")]) == 0

    assert main(["nonsense"]) == 1
    assert main(["run", "--train", str(tmp_path / "missing.csv")]) == 1
    assert main(["run", "--train", str(train_path), "--sweeps", "0"]) == 1
    assert main(["run", "--train", str(train_path), "--test", str(test_path), "--q", "9",
                 "--sweeps", "20", "--burn-in", "5", "--out", str(tmp_path / "x")]) == 2


def test_cli_config_file_with_flag_override(tmp_path, csv_pair):
    train_path, test_path = csv_pair
    conf = tmp_path / "run.conf"
    conf.write_text(f"train={train_path}\ntest={test_path}\nsweeps=20\nburn-in=5\nq=3\n", encoding="utf-8")
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(conf), "--q", "2", "--out", str(out)]) == 0
    assert load_bundle(str(out)).affine_map.q == 2

    conf.write_text("unknown-key=1\n", encoding="utf-8")
    assert main(["fit", "--config", str(conf)]) == 1


def _drifting_target(seed: int) -> SynthSpec:
    # Domain 2 sits higher on x2 and the target drifts far along x2; y never depends on x2
    return SynthSpec(
        atoms=[[2.0, 3.0, 0.0], [-2.0, -3.0, 0.0]],
        sizes=[100, 100],
        noise_std=0.1,
        feature_shift=[[0.0, 0.0], [0.0, 1.5]],
        target_shift=[0.0, 6.0],
        test_size=50,
        seed=seed,
    )


def test_transfer_beats_plain_ridge_under_target_drift():
    cfg = RunConfig(gibbs={"sweeps": 100, "burn_in": 50})
    wins = 0
    for seed in range(5):
        train, _, test, _ = generate_synthetic(_drifting_target(seed))
        seeded = cfg.model_copy(update={"gibbs": cfg.gibbs.model_copy(update={"seed": seed})})
        _, transferred, _ = run_pipeline(seeded, train, test)
        _, plain, _ = ridge_baseline(train, test, seeded.ridge_lambda)
        wins += transferred < plain
    assert wins >= 4


def test_every_arm_follows_the_ridge_grid(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    grid = [1e-3, 1e3]
    cfg = fast_config.model_copy(update={"ridge_grid": grid})
    _, _, bundle = run_pipeline(cfg, train, test)
    assert bundle.ridge.ridge_lambda in grid

    _, _, plain = ridge_baseline(train, test, cfg.ridge_lambda, grid=cfg.ridge_grid, seed=cfg.split_seed)
    assert plain.ridge_lambda in grid

    fixed = [tca_predict(train, test, cfg, ridge_lambda=value)[1] for value in grid]
    assert tca_predict(train, test, cfg)[1] in fixed


def test_transferred_projection_pads_single_component(two_domain_data, fast_config):
    train, _, test, _ = two_domain_data
    _, _, bundle = run_pipeline(_with(fast_config, q=1), train, test)
    frame = emit_projection(bundle, train, test, "transferred")
    assert len(frame) == train.n + test.n
    assert (frame["x2"] == 0.0).all()
    assert frame["x1"].abs().max() > 0


def test_target_shift_moves_only_test_features():
    spec = _drifting_target(0)
    train, _, test, _ = generate_synthetic(spec)
    assert abs(train.features[:, 1].mean() - 0.75) < 0.5
    assert abs(test.features[:, 1].mean() - 6.75) < 0.75
    assert abs(test.features[:, 0].mean()) < 0.75

    with pytest.raises(ValidationError):
        spec.model_validate({**spec.model_dump(), "target_shift": [1.0]})
    with pytest.raises(ValidationError):
        spec.model_validate({**spec.model_dump(), "feature_shift": [[0.0], [1.0]]})


def test_sweep_writes_rmse_and_domain_tables(tmp_path, two_domain_spec):
    entries = load_manifest(_manifest(tmp_path, two_domain_spec))
    tables = sweep(entries, {"q": [1, 9], "av": [0.01, 10.0]}, str(tmp_path / "sweep"))
    assert set(tables) == {"rmse", "m"}

    scores = pd.read_csv(tmp_path / "sweep" / "sweep_rmse.csv")
    assert list(scores.columns) == ["param", "value", "dataset", "rmse", "status", "error"]
    assert len(scores) == 2 * 2
    ok = scores[scores["value"] == 1]
    assert (ok["status"] == "ok").all()
    assert np.isfinite(ok["rmse"]).all()
    assert (scores[scores["value"] == 9]["status"] == "failed").all()

    domains = pd.read_csv(tmp_path / "sweep" / "sweep_domains.csv")
    assert list(domains.columns)[:4] == ["param", "value", "dataset", "m"]
    assert sorted(domains["dataset"].unique()) == ["synth1", "synth2"]
    assert (domains["m"] >= 1).all()

    with pytest.raises(BenchmarkError, match="cannot sweep"):
        sweep(entries, {"mu": [1.0]}, str(tmp_path / "bad"))


def test_cli_sweep(tmp_path, two_domain_spec):
    manifest = _manifest(tmp_path, two_domain_spec)
    out = tmp_path / "sweep"
    assert main(["sweep", "--manifest", manifest, "--param", "a0=10,100", "--out", str(out)]) == 0
    assert len(pd.read_csv(out / "sweep_domains.csv")) == 2 * 2
    assert not (out / "sweep_rmse.csv").exists()
    assert main(["sweep", "--manifest", manifest, "--param", "mu=1"]) == 1
    assert main(["sweep", "--manifest", manifest, "--param", "q"]) == 1
