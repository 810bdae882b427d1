"""Experiment runner and reporting: seeded (config, seed) jobs, immutable JSON
run records, grouped mean/min/max tables, and the spikiness diagnostic.

Every run is reproducible from the config snapshot embedded in its record;
records are written atomically and aggregated with 64-bit accumulation.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptation import (
    BIDIR_NONE,
    FPT,
    ORCA,
    PARALLEL_FLIPPING,
    SEQUENCE_DOUBLING,
    AdaptationConfig,
    Pipeline,
    evaluate_nrmse,
    instance_nrmse,
    run_adaptation,
)
from .bidir import parallel_flipping_train
from .container import DataFileError
from .pde_data import load_dataset
from .proxy_data import build_proxy_set, load_corpus
from .tensor import ContractError
from .transformer import (
    DECODER_ONLY,
    ENCODER_ONLY,
    ModelConfig,
    TransformerModel,
    build_model,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

SCHEMA_VERSION = 1


def nrmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Scale-independent error for one instance: ||pred-truth|| / ||truth||."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return instance_nrmse(pred, truth)


def spikiness_diagnostic(pred: np.ndarray) -> tuple[float, float]:
    """Total variation of each half of a prediction (exclusive halves).

    Quantifies the first-half/second-half irregularity asymmetry of causal
    pipelines; the step across the midpoint belongs to neither half.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    L = len(pred)
    if L % 2 != 0:
        raise ContractError("spikiness needs an even-length prediction")
    h = L // 2
    first = float(np.abs(np.diff(pred[:h])).sum())
    second = float(np.abs(np.diff(pred[h:])).sum())
    return first, second


@dataclass
class ExperimentConfig:
    name: str
    dataset_file: str
    out_dir: str
    arch: str = DECODER_ONLY
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 256
    max_positions: int = 256
    vocab_size: int = 64
    pretrained: bool = True
    checkpoint_file: str | None = None
    corpus_file: str | None = None
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    pretrain_seed: int = 1234
    method: str = ORCA
    bidir_method: str = BIDIR_NONE
    optimizer: str | None = None
    learning_rate: float | None = None
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 16
    stage1_steps: int = 100
    stage1_lr: float = 3e-3
    stage1_batch_instances: int = 8
    otdd_batch: int = 128
    pseudo_label_bins: int = 10
    sinkhorn_max_iters: int = 300
    stage1_through_body: bool = False
    restart_positions: bool = False
    pooled_predictor: bool = False
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.method not in (FPT, ORCA):
            raise ContractError(f"unknown method {self.method!r}")
        if self.bidir_method not in (BIDIR_NONE, PARALLEL_FLIPPING, SEQUENCE_DOUBLING):
            raise ContractError(f"unknown bidir method {self.bidir_method!r}")
        if self.bidir_method == SEQUENCE_DOUBLING and self.batch_size > 8:
            # doubled sequences double the per-step footprint
            self.batch_size = 8

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(arch=self.arch, d_model=self.d_model, n_heads=self.n_heads,
                           n_layers=self.n_layers, d_ff=self.d_ff,
                           max_positions=self.max_positions, vocab_size=self.vocab_size,
                           seed=seed)

    def adaptation_config(self, seed: int) -> AdaptationConfig:
        return AdaptationConfig(method=self.method, bidir_method=self.bidir_method,
                                optimizer=self.optimizer, learning_rate=self.learning_rate,
                                weight_decay=self.weight_decay, epochs=self.epochs,
                                batch_size=self.batch_size, stage1_steps=self.stage1_steps,
                                stage1_lr=self.stage1_lr,
                                stage1_batch_instances=self.stage1_batch_instances,
                                otdd_batch=self.otdd_batch,
                                pseudo_label_bins=self.pseudo_label_bins,
                                sinkhorn_max_iters=self.sinkhorn_max_iters,
                                stage1_through_body=self.stage1_through_body,
                                restart_positions=self.restart_positions, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise DataFileError(f"experiment config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(entropy=tuple(parts)).generate_state(1)[0])


@dataclass
class RunRecord:
    schema_version: int
    config: dict
    seed: int
    family: str
    test_nrmse: float
    initial_test_nrmse: float
    epoch_losses: dict
    stage1_trace: dict
    optimizer: str
    learning_rate: float
    optimizer_overridden: bool
    stage1_converged_fraction: float | None
    aborted: bool
    spikiness: dict
    wallclock_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def record_path(config: ExperimentConfig, seed: int) -> str:
    return os.path.join(config.out_dir, f"{config.name}_seed{seed}.json")


def _write_atomic(path: str, text: str) -> None:
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-record-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _prepare_base_model(config: ExperimentConfig) -> TransformerModel | None:
    """Resolve the shared pretrained model (checkpoint or in-process pretraining).

    The random-init ablation (pretrained=False) returns None and never touches
    a checkpoint file; models are then built per seed.
    """
    if not config.pretrained:
        return None
    if config.checkpoint_file:
        return load_checkpoint(config.checkpoint_file)
    if not config.corpus_file:
        raise DataFileError("pretrained=true needs checkpoint_file or corpus_file "
                            "(in-process pretraining uses the corpus)")
    corpus = load_corpus(config.corpus_file)
    model = build_model(config.model_config(config.pretrain_seed))
    pretrain(model, [t for t, _ in corpus.sequences], steps=config.pretrain_steps,
             learning_rate=config.pretrain_lr, batch_size=config.pretrain_batch,
             seed=config.pretrain_seed)
    return model


def _make_pipeline(config: ExperimentConfig, base: TransformerModel | None,
                   seed: int, role: int, out_length: int) -> Pipeline:
    if base is not None:
        model = base.clone()
    else:
        model = build_model(config.model_config(_derive_seed(seed, 7, role)))
    return Pipeline.create(model, seed=_derive_seed(seed, 11, role),
                           pooled_out_length=out_length if config.pooled_predictor else None)


def run_one(config: ExperimentConfig, seed: int,
            base_model: TransformerModel | None = None) -> RunRecord:
    """Execute one (config, seed) job end to end and persist its record."""
    t0 = time.time()
    dataset = load_dataset(config.dataset_file)
    if base_model is None and config.pretrained:
        base_model = _prepare_base_model(config)
    out_length = dataset.grid.n_x

    corpus = None
    if config.method == ORCA:
        if not config.corpus_file:
            raise DataFileError("ORCA runs need corpus_file for the proxy dataset")
        corpus = load_corpus(config.corpus_file)

    adapt = config.adaptation_config(seed)
    pipeline = _make_pipeline(config, base_model, seed, role=0, out_length=out_length)
    proxy = build_proxy_set(pipeline.model, corpus) if corpus is not None else None

    stage1_trace: dict = {}
    epoch_losses: dict = {}
    if config.bidir_method == PARALLEL_FLIPPING:
        partner = _make_pipeline(config, base_model, seed, role=1, out_length=out_length)
        proxy_rev = build_proxy_set(partner.model, corpus) if corpus is not None else None
        pair, rep_f, rep_r = parallel_flipping_train(pipeline, partner, dataset, adapt,
                                                     proxy=proxy, proxy_reversed=proxy_rev)
        reports = {"forward": rep_f, "reversed": rep_r}
        predictions = [pair.predict(inst.input.data)[:, 0] for inst in dataset.test]
        initial = rep_f.train.initial_test_nrmse
        train_rep = rep_f.train
        for name, rep in reports.items():
            epoch_losses[name] = rep.train.epoch_losses
            if rep.stage1 is not None:
                stage1_trace[name] = rep.stage1.trace
        aborted = rep_f.train.aborted or rep_r.train.aborted
        s1_frac = rep_f.stage1.converged_fraction if rep_f.stage1 else None
    else:
        report = run_adaptation(pipeline, dataset, adapt, proxy=proxy)
        train_rep = report.train
        initial = report.train.initial_test_nrmse
        epoch_losses["forward"] = report.train.epoch_losses
        if report.stage1 is not None:
            stage1_trace["forward"] = report.stage1.trace
        aborted = report.train.aborted
        s1_frac = report.stage1.converged_fraction if report.stage1 else None
        from . import tensor as T

        with T.no_grad():
            from .adaptation import predict_sequence

            predictions = [predict_sequence(pipeline.model, pipeline.embedder,
                                            pipeline.predictor, inst.input,
                                            bidir_method=config.bidir_method,
                                            restart_positions=config.restart_positions,
                                            ).data[:, 0]
                           for inst in dataset.test]

    final = float(np.mean([instance_nrmse(p, inst.target.data)
                           for p, inst in zip(predictions, dataset.test)]))
    tv_pairs = [spikiness_diagnostic(p) for p in predictions]
    spikiness = {"first_half_tv": float(np.mean([a for a, _ in tv_pairs])),
                 "second_half_tv": float(np.mean([b for _, b in tv_pairs]))}

    record = RunRecord(
        schema_version=SCHEMA_VERSION,
        config=config.to_dict(),
        seed=seed,
        family=dataset.family,
        test_nrmse=final,
        initial_test_nrmse=initial,
        epoch_losses=epoch_losses,
        stage1_trace=stage1_trace,
        optimizer=train_rep.optimizer,
        learning_rate=train_rep.learning_rate,
        optimizer_overridden=train_rep.optimizer_overridden,
        stage1_converged_fraction=s1_frac,
        aborted=aborted,
        spikiness=spikiness,
        wallclock_s=round(time.time() - t0, 3),
    )
    _write_atomic(record_path(config, seed), record.to_json())
    return record


def _run_job(args: tuple) -> dict:
    config_dict, seed = args
    record = run_one(ExperimentConfig.from_dict(config_dict), seed)
    return asdict(record)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> list[RunRecord]:
    """Run every seed of the experiment; seeds are independent jobs.

    With multiple workers the shared pretrained model is materialized once as
    a checkpoint so worker processes load instead of re-pretraining.
    """
    if workers > 1:
        if config.pretrained and not config.checkpoint_file:
            base = _prepare_base_model(config)
            ckpt = os.path.join(config.out_dir, f"{config.name}_pretrained.ckpt")
            save_checkpoint(base, ckpt)
            config = copy.deepcopy(config)
            config.checkpoint_file = ckpt
        jobs = [(config.to_dict(), seed) for seed in config.seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dicts = list(pool.map(_run_job, jobs))
        return [RunRecord.from_dict(d) for d in dicts]
    base = _prepare_base_model(config) if config.pretrained else None
    return [run_one(config, seed, base_model=base) for seed in config.seeds]


# -- aggregation ---------------------------------------------------------------

GROUP_KEYS = ("family", "arch", "d_model", "n_layers", "pretrained", "method", "bidir_method")
CSV_COLUMNS = ("dataset", "arch", "d_model", "n_layers", "pretrained", "method",
               "bidir_method", "seed_count", "nrmse_mean", "nrmse_min", "nrmse_max",
               "wallclock_s")


@dataclass
class TableRow:
    dataset: str
    arch: str
    d_model: int
    n_layers: int
    pretrained: bool
    method: str
    bidir_method: str
    seed_count: int
    nrmse_mean: float
    nrmse_min: float
    nrmse_max: float
    wallclock_s: float


@dataclass
class ResultsTable:
    rows: list[TableRow]


def load_records(records_dir) -> list[dict]:
    if not os.path.isdir(records_dir):
        raise DataFileError(f"records directory not found: {records_dir}")
    records = []
    for name in sorted(os.listdir(records_dir)):
        if name.endswith(".json"):
            with open(os.path.join(records_dir, name), "r", encoding="utf-8") as fh:
                records.append(json.load(fh))
    return records


def aggregate(records: list[dict]) -> ResultsTable:
    """Group records and compute mean/min/max test nRMSE (64-bit sums)."""
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        cfg = rec["config"]
        key = (rec["family"], cfg["arch"], cfg["d_model"], cfg["n_layers"],
               cfg["pretrained"], cfg["method"], cfg["bidir_method"])
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups, key=str):
        members = groups[key]
        scores = np.array([m["test_nrmse"] for m in members], dtype=np.float64)
        walls = np.array([m["wallclock_s"] for m in members], dtype=np.float64)
        rows.append(TableRow(dataset=key[0], arch=key[1], d_model=key[2], n_layers=key[3],
                             pretrained=bool(key[4]), method=key[5], bidir_method=key[6],
                             seed_count=len(members),
                             nrmse_mean=float(scores.sum() / len(scores)),
                             nrmse_min=float(scores.min()),
                             nrmse_max=float(scores.max()),
                             wallclock_s=float(walls.sum() / len(walls))))
    return ResultsTable(rows=rows)


def table_to_csv(table: ResultsTable, path) -> None:
    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in table.rows:
            writer.writerow([r.dataset, r.arch, r.d_model, r.n_layers,
                             str(r.pretrained).lower(), r.method, r.bidir_method,
                             r.seed_count, repr(r.nrmse_mean), repr(r.nrmse_min),
                             repr(r.nrmse_max), repr(r.wallclock_s)])


def table_from_csv(path) -> ResultsTable:
    if not os.path.exists(path):
        raise DataFileError(f"table file not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(TableRow(dataset=rec["dataset"], arch=rec["arch"],
                                 d_model=int(rec["d_model"]), n_layers=int(rec["n_layers"]),
                                 pretrained=rec["pretrained"] == "true",
                                 method=rec["method"], bidir_method=rec["bidir_method"],
                                 seed_count=int(rec["seed_count"]),
                                 nrmse_mean=float(rec["nrmse_mean"]),
                                 nrmse_min=float(rec["nrmse_min"]),
                                 nrmse_max=float(rec["nrmse_max"]),
                                 wallclock_s=float(rec["wallclock_s"])))
    return ResultsTable(rows=rows)
