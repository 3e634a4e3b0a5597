"""Adam optimiser and the epoch loop with early stopping and resumable checkpoints."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import check_or_regenerate
from .data import HSV_GAINS, center_crop, hsv_jitter
from .errors import ConfigHashError, NumericError
from .inference import prepare
from .loss import LossWeights, compute_loss
from .model import read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; state is kept per parameter name."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.step_count, 1.0 - b2**self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        out = {"optim.step": np.array(float(self.step_count))}
        for name, _ in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, entries):
        self.step_count = int(entries["optim.step"])
        for name, _ in self.params:
            self.m[name][...] = entries[f"optim.m.{name}"]
            self.v[name][...] = entries[f"optim.v.{name}"]


@dataclass
class TrainOptions:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    patience: int = 15
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    center_crop: bool = False
    hsv: bool = False
    hsv_gains: tuple = HSV_GAINS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.patience < 0:
            raise ValueError("lr must be > 0 and patience >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    obj: float
    box: float
    cls: float

    def to_line(self):
        return f"{self.epoch} {self.train_loss:.10f} {self.val_loss:.10f} {self.obj:.10f} {self.box:.10f} {self.cls:.10f}"


CURVE_HEADER = "# epoch train_loss val_loss obj box cls"


def fit_anchors(config, images, seed=0):
    """Keep the config's anchors if they pass the recall gate on ``images``, else refit.

    Returns ``(config, AnchorReport)``; label sizes are taken at the model input scale.
    """
    size = config.input_size
    wh = np.concatenate([prepare(img, size)[0].labels[:, 3:5] for img in images]) * size
    anchors, report = check_or_regenerate(wh, config.anchors, seed=seed)
    return (config if not report.regenerated else config.replace(anchors=anchors)), report


class Trainer:
    """Runs epochs over a fixed list of LabeledImages.

    The validation loss drives early stopping; when no validation images are
    given the training loss is used. Stopping happens once ``patience``
    consecutive epochs fail to improve on the best loss.
    """

    def __init__(self, model, images, options=None, val_images=None):
        self.model = model
        self.options = options or TrainOptions()
        self.images = list(images)
        self.val_images = list(val_images) if val_images else None
        if not self.images:
            raise ValueError("training needs at least one image")
        self.optim = Adam(model.named_parameters(), lr=self.options.lr)
        self.epoch = 0
        self.best = math.inf
        self.bad_epochs = 0
        self.history = []

    # -------------------------------------------------------------- batches

    def _augment(self, img, epoch, index):
        o = self.options
        if o.center_crop:
            img = center_crop(img)
        if o.hsv:
            img = hsv_jitter(img, o.hsv_gains, seed=(o.seed, epoch, index))
        return prepare(img, self.model.config.input_size)[0]

    def _batch(self, images, indices, epoch, augment):
        prepared = [self._augment(images[i], epoch, i) if augment else prepare(images[i], self.model.config.input_size)[0] for i in indices]
        pixels = np.stack([p.pixels for p in prepared])
        rows = [np.column_stack([np.full(len(p.labels), b), p.labels]) for b, p in enumerate(prepared)]
        return pixels, np.concatenate(rows) if rows else np.zeros((0, 6))

    def _loss(self, pixels, targets):
        cfg = self.model.config
        return compute_loss(self.model(pixels), targets, cfg.anchors, cfg.num_classes, self.options.weights)

    # ---------------------------------------------------------------- epochs

    def run_epoch(self):
        o = self.options
        epoch = self.epoch
        order = np.random.default_rng(o.seed + epoch).permutation(len(self.images))
        self.model.train()
        totals, parts = [], []
        for start in range(0, len(order), o.batch_size):
            pixels, targets = self._batch(self.images, order[start : start + o.batch_size], epoch, True)
            self.model.zero_grad()
            res = self._loss(pixels, targets)
            value = float(res.total.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"loss became {value} at epoch {epoch}, batch {start // o.batch_size} "
                    f"(obj {res.obj}, box {res.box}, cls {res.cls}); try a lower learning rate"
                )
            res.total.backward()
            self.optim.step()
            totals.append(value)
            parts.append((res.obj, res.box, res.cls))
        train_loss = float(np.mean(totals))
        val_loss = self.validation_loss() if self.val_images else train_loss
        obj, box, cls = np.mean(parts, axis=0)
        rec = EpochRecord(epoch, train_loss, val_loss, float(obj), float(box), float(cls))
        self.history.append(rec)
        if val_loss < self.best:
            self.best, self.bad_epochs = val_loss, 0
        else:
            self.bad_epochs += 1
        self.epoch += 1
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        return rec

    def validation_loss(self):
        self.model.eval()
        total = 0.0
        try:
            with T.no_grad():
                for start in range(0, len(self.val_images), self.options.batch_size):
                    idx = range(start, min(start + self.options.batch_size, len(self.val_images)))
                    pixels, targets = self._batch(self.val_images, idx, self.epoch, False)
                    total += float(self._loss(pixels, targets).total.data) * len(idx)
        finally:
            self.model.train()
        return total / len(self.val_images)

    @property
    def should_stop(self):
        return self.bad_epochs > 0 and self.bad_epochs >= self.options.patience

    def fit(self, callback=None):
        """Train until the epoch limit or early stop; returns the history."""
        while self.epoch < self.options.epochs and not self.should_stop:
            rec = self.run_epoch()
            if callback:
                callback(self, rec)
        return self.history

    # ------------------------------------------------------------ checkpoints

    def save(self, path):
        extra = self.optim.state()
        extra["train.epoch"] = np.array(float(self.epoch))
        extra["train.best"] = np.array(self.best)
        extra["train.bad_epochs"] = np.array(float(self.bad_epochs))
        save_checkpoint(self.model, path, extra)

    def resume(self, path):
        """Restore model, optimiser and loop counters saved by :meth:`save`."""
        config_hash, entries = read_checkpoint(path)
        if config_hash != self.model.config.hash():
            raise ConfigHashError(f"checkpoint {path} was written for a different model config")
        self.model.load_state({k: v for k, v in entries.items() if not k.startswith(("optim.", "train."))})
        self.optim.load_state(entries)
        self.epoch = int(entries["train.epoch"])
        self.best = float(entries["train.best"])
        self.bad_epochs = int(entries["train.bad_epochs"])

    def curve_text(self):
        return "\n".join([CURVE_HEADER] + [r.to_line() for r in self.history]) + "\n"
