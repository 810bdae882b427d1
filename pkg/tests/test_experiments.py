import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from crossmodal_pde.container import DataFileError
from crossmodal_pde.experiments import (
    ExperimentConfig,
    ResultsTable,
    RunRecord,
    TableRow,
    aggregate,
    load_records,
    nrmse,
    record_path,
    run_experiment,
    run_one,
    spikiness_diagnostic,
    table_from_csv,
    table_to_csv,
)
from crossmodal_pde.figures import emit_figure
from crossmodal_pde.pde_data import GridSpec, build_dataset
from crossmodal_pde.proxy_data import gen_corpus, save_corpus
from crossmodal_pde.tensor import ContractError


# -- nrmse ----------------------------------------------------------------


def test_nrmse_exact_prediction():
    t = np.array([1.0, -2.0, 3.0])
    assert nrmse(t, t) == 0.0


def test_nrmse_double_prediction():
    t = np.array([1.0, -2.0, 3.0])
    assert nrmse(2 * t, t) == pytest.approx(1.0)


def test_nrmse_scale_independent():
    rng = np.random.default_rng(0)
    pred, truth = rng.normal(size=8), rng.normal(size=8)
    base = nrmse(pred, truth)
    for a in (2.0, -0.5, 100.0):
        assert nrmse(a * pred, a * truth) == pytest.approx(base, rel=1e-12)


def test_nrmse_zero_truth_rejected():
    with pytest.raises(ContractError):
        nrmse(np.ones(4), np.zeros(4))


# -- spikiness --------------------------------------------------------------


def test_spikiness_constant():
    assert spikiness_diagnostic(np.full(8, 2.0)) == (0.0, 0.0)


def test_spikiness_hand_count():
    pred = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    assert spikiness_diagnostic(pred) == (3.0, 0.0)


def test_spikiness_odd_length_rejected():
    with pytest.raises(ContractError):
        spikiness_diagnostic(np.zeros(7))


# -- run records ---------------------------------------------------------------


def tiny_experiment(tmp_path, name="exp", **overrides) -> ExperimentConfig:
    dataset_file = str(tmp_path / "adv.bin")
    build_dataset("advection", 6, 2, GridSpec(n_x=32, t_out=0.5), seed=5,
                  out_path=dataset_file)
    corpus_file = str(tmp_path / "corpus.bin")
    save_corpus(gen_corpus(seed=3, n_sequences=30), corpus_file)
    base = dict(name=name, dataset_file=dataset_file, out_dir=str(tmp_path / "records"),
                arch="decoder_only", d_model=32, n_heads=4, n_layers=2, d_ff=64,
                max_positions=64, pretrained=False, corpus_file=corpus_file,
                method="fpt", epochs=2, batch_size=4, stage1_steps=3, otdd_batch=32,
                sinkhorn_max_iters=100, pretrain_steps=30, seeds=[0])
    base.update(overrides)
    return ExperimentConfig(**base)


def strip_wallclock(d: dict) -> dict:
    d = dict(d)
    d.pop("wallclock_s", None)
    return d


def test_run_record_reproducible(tmp_path):
    config = tiny_experiment(tmp_path)
    rec1 = run_one(config, seed=0)
    rec2 = run_one(config, seed=0)
    a, b = strip_wallclock(json.loads(rec1.to_json())), strip_wallclock(json.loads(rec2.to_json()))
    assert a == b
    assert rec1.test_nrmse == pytest.approx(rec2.test_nrmse, abs=1e-6)


def test_run_record_persisted_and_loadable(tmp_path):
    config = tiny_experiment(tmp_path)
    rec = run_one(config, seed=0)
    path = record_path(config, 0)
    with open(path) as fh:
        loaded = json.load(fh)
    assert loaded["schema_version"] == 1
    assert loaded["test_nrmse"] == rec.test_nrmse
    assert loaded["config"]["name"] == config.name


def test_random_init_never_reads_checkpoint(tmp_path):
    config = tiny_experiment(tmp_path, pretrained=False,
                             checkpoint_file=str(tmp_path / "missing.ckpt"))
    rec = run_one(config, seed=0)  # would raise if the checkpoint were opened
    assert np.isfinite(rec.test_nrmse)


def test_orca_requires_corpus_file(tmp_path):
    config = tiny_experiment(tmp_path, method="orca", corpus_file=None)
    with pytest.raises(DataFileError):
        run_one(config, seed=0)


def test_missing_dataset_file_named(tmp_path):
    config = tiny_experiment(tmp_path)
    config.dataset_file = str(tmp_path / "nope.bin")
    with pytest.raises(DataFileError, match="nope.bin"):
        run_one(config, seed=0)


def test_run_experiment_multi_seed_stats(tmp_path):
    config = tiny_experiment(tmp_path, seeds=[0, 1, 2])
    records = run_experiment(config)
    assert len(records) == 3
    table = aggregate([json.loads(r.to_json()) for r in records])
    assert len(table.rows) == 1
    row = table.rows[0]
    assert row.seed_count == 3
    assert row.nrmse_min <= row.nrmse_mean <= row.nrmse_max


def test_sequence_doubling_reduces_batch_size(tmp_path):
    config = tiny_experiment(tmp_path, bidir_method="sequence_doubling", batch_size=16)
    assert config.batch_size == 8


def test_aggregate_means_are_exact(tmp_path):
    config = tiny_experiment(tmp_path, seeds=[0, 1])
    records = [json.loads(r.to_json()) for r in run_experiment(config)]
    table = aggregate(records)
    scores = np.array([r["test_nrmse"] for r in records], dtype=np.float64)
    assert table.rows[0].nrmse_mean == float(scores.sum() / 2)


def test_load_records_round_trip(tmp_path):
    config = tiny_experiment(tmp_path, seeds=[0, 1])
    run_experiment(config)
    records = load_records(config.out_dir)
    assert len(records) == 2
    assert {r["seed"] for r in records} == {0, 1}


# -- table CSV ---------------------------------------------------------------


def sample_table():
    return ResultsTable(rows=[
        TableRow(dataset="advection", arch="decoder_only", d_model=64, n_layers=4,
                 pretrained=True, method="orca", bidir_method="none", seed_count=5,
                 nrmse_mean=0.5, nrmse_min=0.4, nrmse_max=0.7, wallclock_s=12.5),
        TableRow(dataset="advection", arch="encoder_only", d_model=64, n_layers=4,
                 pretrained=True, method="orca", bidir_method="none", seed_count=5,
                 nrmse_mean=0.2, nrmse_min=0.15, nrmse_max=0.3, wallclock_s=11.0),
    ])


def test_csv_round_trip(tmp_path):
    table = sample_table()
    path = tmp_path / "table.csv"
    table_to_csv(table, path)
    back = table_from_csv(path)
    assert back == table


# -- figures --------------------------------------------------------------------


def parse_svg_bars(svg: str):
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    bars = [el for el in root.iter(f"{ns}rect") if "data-mean" in el.attrib]
    return root, bars


def test_figure_geometry_single_bar():
    table = ResultsTable(rows=[sample_table().rows[0]])
    svg = emit_figure(table)
    root, bars = parse_svg_bars(svg)
    assert len(bars) == 1
    bar = bars[0]
    assert float(bar.attrib["data-mean"]) == 0.5
    # whisker endpoints map min/max through the same linear scale as the bar top
    ns = "{http://www.w3.org/2000/svg}"
    whiskers = [el for el in root.iter(f"{ns}line") if el.attrib.get("class") == "whisker"]
    assert len(whiskers) == 1
    y_hi = float(whiskers[0].attrib["y1"])  # max value -> smaller pixel y
    y_lo = float(whiskers[0].attrib["y2"])
    bar_top = float(bar.attrib["y"])
    assert y_hi < bar_top < y_lo
    # linearity: pixel distance ratio equals value distance ratio
    mean, vmin, vmax = 0.5, 0.4, 0.7
    ratio_px = (y_lo - bar_top) / (y_lo - y_hi)
    ratio_val = (mean - vmin) / (vmax - vmin)
    assert ratio_px == pytest.approx(ratio_val, abs=0.01)


def test_figure_deterministic():
    table = sample_table()
    assert emit_figure(table) == emit_figure(table)


def test_figure_bar_order_follows_means():
    table = sample_table()
    svg = emit_figure(table)
    _, bars = parse_svg_bars(svg)
    tops = [float(b.attrib["y"]) for b in bars]
    means = [float(b.attrib["data-mean"]) for b in bars]
    # higher mean -> taller bar -> smaller top y
    assert (means[0] > means[1]) == (tops[0] < tops[1])


def test_figure_empty_table_rejected():
    with pytest.raises(ContractError):
        emit_figure(ResultsTable(rows=[]))


def test_figure_is_valid_xml():
    ET.fromstring(emit_figure(sample_table()))
