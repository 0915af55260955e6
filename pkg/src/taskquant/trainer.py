"""Training schemes for the quantized codec and their per-epoch curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, codec
from .autodiff import Tensor
from .datagen import LabeledScene, stack
from .nets import EncoderDecoderConfig, Network, build_decoder, build_encoder, build_feature_extractor
from .objectives import SCHEMES, composite, mse, perceptual
from .task import FrozenSegmenter, confusion, hard_labels, imitation_target, metrics_from_confusion, segment
from .vq import Codebook, IndexMap, codebook_usage, dequantize, quantize, reseed_dead_codewords, straight_through

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scheme:
    loss: str
    variant: str = "shallow"
    pretrain: bool = False
    dagger: bool = False


SCHEME_TABLE: dict[str, Scheme] = {
    "VQVAE": Scheme("Lv"),
    "GOSVAE": Scheme("Ls"),
    "GOSVAE_STAR": Scheme("Ls", pretrain=True),
    "VQVAE_DAGGER": Scheme("Lv", variant="residual", dagger=True),
    "GOSVAE_DAGGER": Scheme("Ls", variant="residual", pretrain=True, dagger=True),
    "ABL_CE": Scheme("Lsc"),
    "ABL_KLD": Scheme("Lk"),
    "ABL_VQ_KLD": Scheme("Lvk"),
    "ABL_VQ_LPIPS": Scheme("Lvp"),
    "ABL_KLD_LPIPS": Scheme("Lkp"),
}

WIDTHS = {"shallow": (16, 32), "residual": (32, 64)}
TERM_COLUMNS = ("mse", "perceptual", "jsd", "kld", "ce", "codebook", "commitment")
CURVE_COLUMNS = ("epoch", "phase") + TERM_COLUMNS + (
    "total", "val_miou", "val_acc", "val_mse", "val_perceptual", "payload_bytes")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "VQVAE"
    r: int = 4
    K: int = 64
    K_dagger: int = 256
    D: int = 8
    beta: float = 0.25
    lr: float = 2e-4
    epochs: int = 50
    finetune_epochs: int = 20
    batch: int = 8
    seed: int = 0
    variant: str | None = None
    precision: str = "single"
    pretrain_checkpoint: str | None = None
    reseed_dead: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEME_TABLE:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    @property
    def spec(self) -> Scheme:
        return SCHEME_TABLE[self.scheme]

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    @property
    def codebook_size(self) -> int:
        return self.K_dagger if self.spec.dagger else self.K

    def net_config(self) -> EncoderDecoderConfig:
        variant = self.variant or self.spec.variant
        return EncoderDecoderConfig(r=self.r, D=self.D, widths=WIDTHS[variant], variant=variant)


class CodecModel:
    """Encoder, codebook and decoder of one transmitter/receiver pair."""

    def __init__(self, encoder: Network, decoder: Network, codebook: Codebook, r: int):
        self.encoder = encoder
        self.decoder = decoder
        self.codebook = codebook
        self.r = r

    @classmethod
    def build(cls, cfg: TrainConfig) -> "CodecModel":
        rng = np.random.default_rng([cfg.seed, 0])
        ncfg = cfg.net_config()
        enc = build_encoder(ncfg, rng, cfg.dtype)
        dec = build_decoder(ncfg, rng, cfg.dtype)
        cb = Codebook.init(cfg.codebook_size, cfg.D, rng, cfg.dtype)
        return cls(enc, dec, cb, cfg.r)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters() + [self.codebook.e]

    def n_params(self) -> int:
        return ad.param_count(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {**self.encoder.state_dict(), **self.decoder.state_dict()}
        state[Codebook.name] = self.codebook.e.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(state)
        self.decoder.load_state_dict(state)
        if state[Codebook.name].shape != self.codebook.e.shape:
            raise ad.ShapeError("codebook shape mismatch")
        self.codebook.e.data[...] = state[Codebook.name]

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.state_dict())

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())

    # transmitter side
    def encode_indices(self, images: np.ndarray) -> IndexMap:
        z_e = self.encoder(Tensor(np.asarray(images, dtype=self.codebook.e.dtype)))
        return quantize(z_e, self.codebook)

    # receiver side
    def decode_indices(self, idx: IndexMap) -> np.ndarray:
        return self.decoder(dequantize(idx, self.codebook)).data

    def forward(self, x: Tensor):
        z_e = self.encoder(x)
        idx = quantize(z_e, self.codebook)
        z_q = dequantize(idx, self.codebook)
        x_hat = self.decoder(straight_through(z_e, z_q))
        return z_e, idx, z_q, x_hat


@dataclass
class TrainingCurves:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str, phase: str | None = None) -> list[float]:
        return [row[name] for row in self.rows if phase is None or row["phase"] == phase]

    def extend(self, other: "TrainingCurves") -> None:
        offset = len(self.rows)
        for row in other.rows:
            self.rows.append({**row, "epoch": row["epoch"] + offset})

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingCurves":
        rows = []
        with open(path, newline="") as fh:
            for raw in csv.DictReader(fh):
                row = {k: (float(v) if v != "" else None) for k, v in raw.items() if k not in ("epoch", "phase")}
                row["epoch"] = int(raw["epoch"])
                row["phase"] = raw["phase"]
                rows.append(row)
        return cls(rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k)) for k in CURVE_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class TrainResult:
    model: CodecModel
    curves: TrainingCurves

    @property
    def codebook(self) -> Codebook:
        return self.model.codebook


@dataclass(frozen=True)
class Evaluation:
    miou: float
    accuracy: float
    mse: float
    perceptual: float
    payload_bytes: float
    payload_fixed_bytes: float
    usage: tuple[int, ...] = ()


def evaluate(model: CodecModel, F: FrozenSegmenter, scenes: list[LabeledScene], extractor,
             batch: int = 25, coder_id: int = codec.HUFFMAN) -> Evaluation:
    """Reconstruct every scene through the packet path and score it."""
    if not scenes:
        return Evaluation(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    dtype = model.codebook.e.dtype
    images, labels = stack(scenes, dtype)
    H, W = images.shape[1:3]
    conf = np.zeros((F.m, F.m), dtype=np.int64)
    sq_err = 0.0
    perc = 0.0
    sizes = []
    fixed = []
    usage = np.zeros(model.codebook.K, dtype=np.int64)
    for s in range(0, len(images), batch):
        x = images[s:s + batch]
        idx = model.encode_indices(x)
        usage += codebook_usage(idx)
        meta = codec.PacketMeta(H, W, model.r, model.codebook.K)
        for one in idx.indices:
            sizes.append(len(codec.encode_packet(one, meta, coder_id)))
            fixed.append(len(codec.encode_packet(one, meta, codec.FIXED)))
        x_hat = model.decode_indices(idx)
        pred = hard_labels(segment(F, Tensor(x_hat.astype(F.dtype))))
        conf += confusion(pred, labels[s:s + batch], F.m)
        sq_err += float(np.sum((x_hat.astype(np.float64) - x) ** 2))
        perc += perceptual(Tensor(x), Tensor(x_hat), extractor).item() * len(x)
    tm = metrics_from_confusion(conf)
    return Evaluation(miou=tm.miou, accuracy=tm.accuracy, mse=sq_err / images.size,
                      perceptual=perc / len(images), payload_bytes=float(np.mean(sizes)),
                      payload_fixed_bytes=float(np.mean(fixed)), usage=tuple(int(u) for u in usage))


def scheme_loss(loss_name: str, model: CodecModel, x: Tensor, F: FrozenSegmenter | None,
                extractor, beta: float):
    z_e, idx, z_q, x_hat = model.forward(x)
    terms = SCHEMES[loss_name]
    S = S_hat = None
    if set(terms) & {"jsd", "kld", "ce"}:
        S = imitation_target(F, x)
        S_hat = segment(F, x_hat)
    return composite(loss_name, x=x, x_hat=x_hat, S=S, S_hat=S_hat, z_e=z_e, z_q=z_q,
                     beta=beta, extractor=extractor), idx


def _run_phase(model: CodecModel, loss_name: str, epochs: int, cfg: TrainConfig, phase: str,
               train: list[LabeledScene], val: list[LabeledScene], F: FrozenSegmenter | None,
               extractor, rng: np.random.Generator) -> TrainingCurves:
    curves = TrainingCurves()
    if epochs == 0:
        return curves
    images, _ = stack(train, cfg.dtype)
    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        sums: dict[str, float] = {}
        nb = 0
        usage = np.zeros(model.codebook.K, dtype=np.int64)
        last_z = None
        for s in range(0, len(order), cfg.batch):
            x = Tensor(images[order[s:s + cfg.batch]])
            lb, idx = scheme_loss(loss_name, model, x, F, extractor, cfg.beta)
            total = lb.total.item()
            if not math.isfinite(total):
                raise DivergenceError(f"{cfg.scheme} {phase} epoch {epoch}: loss {total}")
            opt.zero_grad()
            lb.total.backward()
            opt.step()
            for k, v in lb.values().items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            if cfg.reseed_dead:
                usage += codebook_usage(idx)
                last_z = model.encoder(x).data
        if cfg.reseed_dead and last_z is not None:
            reseed_dead_codewords(model.codebook, last_z, usage, rng)
        ev = evaluate(model, F, val, extractor) if (F is not None and val) else None
        row = {"epoch": epoch, "phase": phase}
        row.update({k: (sums[k] / nb if k in sums else None) for k in TERM_COLUMNS + ("total",)})
        row.update(val_miou=ev.miou if ev else None, val_acc=ev.accuracy if ev else None,
                   val_mse=ev.mse if ev else None, val_perceptual=ev.perceptual if ev else None,
                   payload_bytes=ev.payload_bytes if ev else None)
        curves.rows.append(row)
        log.info("%s %s epoch %d total %.5f val_miou %s", cfg.scheme, phase, epoch, row["total"],
                 f"{row['val_miou']:.2f}" if ev else "-")
    return curves


def _phase_rng(cfg: TrainConfig, phase: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1, phase])


def train(cfg: TrainConfig, train_scenes: list[LabeledScene], val_scenes: list[LabeledScene],
          F: FrozenSegmenter | None, extractor=None, model: CodecModel | None = None) -> TrainResult:
    """Train with the scheme's own loss; pretrain schemes go through both phases."""
    if not train_scenes:
        raise ValueError("training needs a non-empty dataset")
    if cfg.spec.pretrain:
        return pretrain_then_finetune(cfg, train_scenes, val_scenes, F, extractor, pretrained=model)
    extractor = extractor or build_feature_extractor(cfg.dtype)
    digest_before = F.digest() if F is not None else None
    model = model or CodecModel.build(cfg)
    curves = _run_phase(model, cfg.spec.loss, cfg.epochs, cfg, "train", train_scenes, val_scenes,
                        F, extractor, _phase_rng(cfg, 0))
    if F is not None:
        F.verify()
        assert F.digest() == digest_before
    return TrainResult(model, curves)


def pretrain_then_finetune(cfg: TrainConfig, train_scenes, val_scenes, F, extractor=None,
                           pretrained: TrainResult | CodecModel | None = None) -> TrainResult:
    """Phase 1 fits the pixel objective; phase 2 reloads it and fine-tunes on the task objective.

    ``pretrained`` (or ``cfg.pretrain_checkpoint``) skips phase 1.
    """
    if not cfg.spec.pretrain:
        raise ValueError(f"{cfg.scheme} has no pre-training phase")
    extractor = extractor or build_feature_extractor(cfg.dtype)
    curves = TrainingCurves()
    if isinstance(pretrained, TrainResult):
        curves.rows = [{**row, "phase": "pretrain"} for row in pretrained.curves.rows]
        pretrained = pretrained.model
    if pretrained is not None:
        blob = pretrained.checkpoint_bytes()
    elif cfg.pretrain_checkpoint:
        blob = Path(cfg.pretrain_checkpoint).read_bytes()
    else:
        base = CodecModel.build(cfg)
        curves = _run_phase(base, "Lv", cfg.epochs, cfg, "pretrain", train_scenes, val_scenes,
                            F, extractor, _phase_rng(cfg, 0))
        blob = base.checkpoint_bytes()
    model = CodecModel.build(cfg)
    model.load_state_dict(checkpoint.loads(blob))
    fine = _run_phase(model, cfg.spec.loss, cfg.finetune_epochs, cfg, "finetune", train_scenes,
                      val_scenes, F, extractor, _phase_rng(cfg, 1))
    curves.extend(fine)
    if F is not None:
        F.verify()
    return TrainResult(model, curves)


def pretrain_config(cfg: TrainConfig) -> TrainConfig:
    """The plain pixel-objective scheme whose result seeds ``cfg``'s fine-tuning."""
    base = "VQVAE_DAGGER" if cfg.spec.dagger else "VQVAE"
    return replace(cfg, scheme=base)


def curve_correlation(a, b) -> float:
    """Pearson correlation of two equal-length series."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise ValueError("need two equal-length series of at least 3 points")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va == 0.0 or vb == 0.0:
        raise ValueError("series has zero variance")
    return float(np.dot(da, db) / math.sqrt(va * vb))
