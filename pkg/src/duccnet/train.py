"""Training and evaluation orchestration, history logging, ablation runner.

Determinism contract: everything random derives from TrainConfig.seed
through tagged SeedSequence streams (init, split, shuffle, per-sample
augmentation, per-batch dropout), so one run's numeric history is exactly
reproducible. Wall seconds are recorded per epoch but are the one column
that legitimately differs between runs.
"""

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_graph, load_checkpoint, load_into_graph, save_checkpoint
from .data import (
    WORKING_SIZE,
    AugmentConfig,
    augment,
    load_dataset,
    split_train_val,
    synth_crack_corpus,
)
from .graph import backward, forward
from .kernels import resize_bilinear
from .models import (
    ALL_VARIANTS,
    REFERENCE_VA,
    ModelVariant,
    build_variant,
    count_params,
)
from .optim import AdamState, Metrics, adam_step, bce_loss, validation_accuracy
from .rng import TAG_AUGMENT, TAG_DROPOUT, TAG_SHUFFLE, TAG_SPLIT, derive_rng, derive_seed

HISTORY_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,seconds"


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.DUCCNET
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-4
    val_frac: float = 0.1
    augment: "AugmentConfig | None" = field(default_factory=AugmentConfig)
    seed: int = 0
    data_root: "str | None" = None
    synth_n: "int | None" = None  # per class, generated at synth_size
    synth_size: int = WORKING_SIZE
    out_dir: str = "runs/run"
    patience: int = 10  # early stop on val loss; 0 disables
    target_val_acc: "float | None" = None  # optional early-stop targets
    target_train_acc: "float | None" = None
    log: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if (self.data_root is None) == (self.synth_n is None):
            raise ValueError("exactly one of data_root or synth_n must be set")
        if self.synth_n is not None and self.synth_n < 2:
            raise ValueError(f"synth_n must be >= 2, got {self.synth_n}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float

    def csv_row(self):
        return (
            f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.4f},"
            f"{self.val_loss:.6f},{self.val_acc:.4f},{self.seconds:.3f}"
        )


def write_history(path, records):
    lines = [HISTORY_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_samples(cfg: TrainConfig):
    if cfg.data_root is not None:
        _, samples = load_dataset(cfg.data_root)
        return samples
    samples = synth_crack_corpus(cfg.synth_n, cfg.seed, size=cfg.synth_size)
    if cfg.synth_size != WORKING_SIZE:
        for s in samples:
            s.image = resize_bilinear(s.image, WORKING_SIZE, WORKING_SIZE)
    return samples


def _stack_batch(items):
    X = np.stack([s.image for s in items]).astype(np.float32, copy=False)
    y = np.array([[float(s.label)] for s in items], dtype=np.float32)
    return X, y


def _eval_pass(graph, samples, batch_size):
    """Infer-mode loss and metrics over samples in their given order."""
    total_loss = 0.0
    metrics = Metrics()
    for at in range(0, len(samples), batch_size):
        X, y = _stack_batch(samples[at : at + batch_size])
        out, _ = forward(graph, X, mode="infer")
        loss, _ = bce_loss(out, y)
        total_loss += loss * len(y)
        metrics.update(out, y)
    return total_loss / len(samples), metrics


def stop_reason(cfg: TrainConfig, val_acc, train_acc, bad_epochs):
    """Early-stop decision after one epoch; None means keep going."""
    if cfg.target_val_acc is not None and val_acc >= cfg.target_val_acc:
        return f"val accuracy target {cfg.target_val_acc} reached"
    if cfg.target_train_acc is not None and train_acc >= cfg.target_train_acc:
        return f"train accuracy target {cfg.target_train_acc} reached"
    if cfg.patience and bad_epochs >= cfg.patience:
        return f"no val loss improvement in {cfg.patience} epochs"
    return None


def resolve_split(cfg: TrainConfig):
    """The exact (train, val) sample split a train(cfg) run uses."""
    cfg.validate()
    samples = _load_samples(cfg)
    return split_train_val(samples, cfg.val_frac, derive_seed(cfg.seed, TAG_SPLIT))


def train(cfg: TrainConfig):
    """Full training loop. Returns (final Checkpoint, list of EpochRecords).

    Writes history.csv, best.ckpt (highest val accuracy), and final.ckpt
    into cfg.out_dir.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(msg):
        if cfg.log:
            print(msg, flush=True)

    train_s, val_s = resolve_split(cfg)
    graph = build_variant(cfg.variant, seed=cfg.seed)
    adam = AdamState(lr=cfg.lr)
    n = len(train_s)
    if cfg.augment is not None:
        log(
            f"augmentation on: each epoch trains on the {n} originals plus one "
            f"augmented copy per sample ({2 * n} effective images)"
        )
    log(f"variant {cfg.variant.tag}: {count_params(graph).total_trainable} trainable params, "
        f"{n} train / {len(val_s)} val samples, batch {cfg.batch_size}, lr {cfg.lr}")

    records = []
    best_va = -1.0
    best_val_loss = float("inf")
    bad_epochs = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = derive_rng(cfg.seed, TAG_SHUFFLE, epoch)
        if cfg.augment is not None:
            entries = [(i, False) for i in range(n)] + [(i, True) for i in range(n)]
        else:
            entries = [(i, False) for i in range(n)]
        order = shuffle_rng.permutation(len(entries))
        run_loss = 0.0
        seen = 0
        train_metrics = Metrics()
        step = 0
        for at in range(0, len(order), cfg.batch_size):
            chunk = order[at : at + cfg.batch_size]
            if len(chunk) == 1:
                continue  # batch normalization needs >= 2 in train mode
            items = []
            for e in chunk:
                idx, is_aug = entries[e]
                s = train_s[idx]
                if is_aug:
                    aug_rng = derive_rng(cfg.augment.seed, TAG_AUGMENT, epoch, idx)
                    s = augment(s, cfg.augment, aug_rng)
                items.append(s)
            X, y = _stack_batch(items)
            out, tape = forward(
                graph, X, mode="train", rng_seed=derive_seed(cfg.seed, TAG_DROPOUT, epoch, step)
            )
            loss, dpred = bce_loss(out, y)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss {loss} at epoch {epoch} step {step}"
                )
            grads = backward(graph, tape, dpred)
            adam_step(adam, graph.parameters(), grads)
            graph.note_param_update()
            run_loss += loss * len(y)
            seen += len(y)
            train_metrics.update(out, y)
            step += 1
        train_loss = run_loss / seen
        train_acc = validation_accuracy(train_metrics)
        val_loss, val_metrics = _eval_pass(graph, val_s, cfg.batch_size)
        val_acc = validation_accuracy(val_metrics)
        seconds = time.perf_counter() - t0
        records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, seconds))
        log(
            f"epoch {epoch}/{cfg.epochs}  train_loss {train_loss:.4f}  train_acc {train_acc:.2f}  "
            f"val_loss {val_loss:.4f}  val_acc {val_acc:.2f}  ({seconds:.1f} s)"
        )
        if val_acc > best_va:
            best_va = val_acc
            save_checkpoint(out_dir / "best.ckpt", checkpoint_from_graph(graph, cfg.seed, epoch))
        if val_loss < best_val_loss - 1e-9:
            best_val_loss = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
        stop = stop_reason(cfg, val_acc, train_acc, bad_epochs)
        if stop:
            log(f"stopping early: {stop}")
            break
    final = checkpoint_from_graph(graph, cfg.seed, records[-1].epoch)
    save_checkpoint(out_dir / "final.ckpt", final)
    write_history(out_dir / "history.csv", records)
    return final, records


def _resolve_checkpoint(ckpt):
    return load_checkpoint(ckpt) if isinstance(ckpt, (str, Path)) else ckpt


def _resolve_samples(dataset):
    if isinstance(dataset, (str, Path)):
        _, samples = load_dataset(dataset)
        return samples
    return list(dataset)


def graph_from_checkpoint(ckpt):
    ckpt = _resolve_checkpoint(ckpt)
    graph = build_variant(ModelVariant.parse(ckpt.variant))
    load_into_graph(graph, ckpt)
    return graph


def evaluate(ckpt, dataset, batch_size=32):
    """Infer-mode evaluation. Returns (Metrics, va percent, confusion)."""
    graph = graph_from_checkpoint(ckpt)
    samples = _resolve_samples(dataset)
    _, metrics = _eval_pass(graph, samples, batch_size)
    return metrics, validation_accuracy(metrics), metrics.confusion()


def predict(ckpt, image):
    """Probability that a single (H, W, 3) [0,1] image shows a crack."""
    graph = graph_from_checkpoint(ckpt)
    img = np.asarray(image, dtype=np.float32)
    hw = graph.nodes[graph.input_id].input_shape[0]
    if img.shape[:2] != (hw, hw):
        img = resize_bilinear(img, hw, hw)
    out, _ = forward(graph, img[None], mode="infer")
    return float(out[0, 0])


def run_ablation(cfg: TrainConfig):
    """Train all five variants under identical data, seed, and schedule.

    Returns (report text, rows). The report carries no timing, so rerunning
    with the same seed reproduces it byte for byte. Accuracy ordering is
    reported, never asserted.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in ALL_VARIANTS:
        sub = replace(cfg, variant=v, out_dir=str(out_dir / v.tag))
        _, records = train(sub)
        params = count_params(build_variant(v)).total_trainable
        rows.append(
            {
                "variant": v.tag,
                "channel2": v.channel2,
                "skip": v.skip_connection,
                "block7": v.conv_block7,
                "params": params,
                "va": records[-1].val_acc,
                "reference_va": REFERENCE_VA[v.tag],
            }
        )
    lines = [
        f"{'variant':<10} {'channel2':>8} {'skip':>5} {'block7':>7} {'params':>8} "
        f"{'va':>7} {'reference_va':>13}"
    ]
    for r in rows:
        lines.append(
            f"{r['variant']:<10} {'yes' if r['channel2'] else 'no':>8} "
            f"{'yes' if r['skip'] else 'no':>5} {'yes' if r['block7'] else 'no':>7} "
            f"{r['params']:>8} {r['va']:>7.2f} {r['reference_va']:>13.2f}"
        )
    ordering = " < ".join(r["variant"] for r in sorted(rows, key=lambda r: r["va"]))
    lines.append(f"accuracy ordering on this corpus: {ordering}")
    lines.append("reference_va: values reported for the original photographic corpus")
    report = "\n".join(lines) + "\n"
    (out_dir / "ablation.txt").write_text(report)
    return report, rows
