"""Associate adversarial training: the two GANs wired through their bridge domains.

Each iteration runs four phases, one optimizer update each:

1. shape generator side: warp a clean batch with one noise draw, reconstruct
   input and noise from the predicted parameters, score the warp against the
   shape discriminator, and add the diversity term from a second noise draw;
2. shape discriminator: freshly warped fakes (recomputed, detached) against
   destylized photos produced by the texture side without gradient;
3. texture generators: the warped batch enters detached (no gradient crosses
   the boundary between the GANs), cycle weights come from binarizing it;
4. texture discriminators: the phase-3 fakes, detached, against real photos
   and the source glyphs.

All randomness flows from one generator owned by the state, so a fixed seed
fixes the whole run, and checkpoint/resume is bitwise equal to an
uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import networks as nn
from .autodiff import AdamState, LrSchedule, Tensor
from .data import GlyphDataset
from .imagecore import BinaryMask, Image, binarize, otsu_threshold, resize
from .losses import LossReport, SnrConfig

CHECKPOINT_MAGIC = b"GLYPHCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the published full-scale settings."""

    lam: float = 10.0          # cycle weight
    c_weight: float = 2.0      # foreground/background trade-off C
    m_band: float = 6.0        # reconstruction-ratio band M
    image_size: int = 64
    batch_size: int = 64
    lr_gtg: float = 1e-4
    lr_ttg: float = 1e-3
    constant_iters: int = 15000
    decay_iters: int = 15000
    n_ctrl: int = 4
    seed: int = 0
    desk_scale: bool = False
    channel_mult: float = 1.0
    ttg_base: int = 32
    checkpoint_every: int = 1000
    tps_reg: float = 1e-6
    enable_diversity: bool = True
    enable_stroke_weight: bool = True

    DESK_PRESET = {
        "batch_size": 8,
        "constant_iters": 1000,
        "decay_iters": 1000,
        "channel_mult": 0.25,
        "checkpoint_every": 500,
        "desk_scale": True,
    }

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        merged = dict(cls.DESK_PRESET)
        merged.update(overrides)
        return cls(**merged)

    @property
    def total_iters(self) -> int:
        return self.constant_iters + self.decay_iters

    def net_config(self) -> nn.NetConfig:
        return nn.NetConfig(
            image_size=self.image_size,
            n_ctrl=self.n_ctrl,
            channel_mult=self.channel_mult,
            ttg_base=self.ttg_base,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainState:
    """Everything needed to continue a run: nets, moments, RNG, step counter."""

    config: TrainConfig
    gtg: nn.GtgNets
    ttg: nn.TtgNets
    opt_gtg_gen: AdamState
    opt_gtg_disc: AdamState
    opt_ttg_gen: AdamState
    opt_ttg_disc: AdamState
    rng: np.random.Generator
    iteration: int = 0

    @property
    def noise_dim(self) -> int:
        return self.config.net_config().noise_dim

    def optimizers(self) -> list[tuple[str, AdamState]]:
        return [
            ("gtg_gen", self.opt_gtg_gen),
            ("gtg_disc", self.opt_gtg_disc),
            ("ttg_gen", self.opt_ttg_gen),
            ("ttg_disc", self.opt_ttg_disc),
        ]

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.gtg.named_params() + self.ttg.named_params()

    def named_state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return self.gtg.named_state() + self.ttg.named_state()

    def zero_all_grads(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()


def init_state(config: TrainConfig, dtype=np.float32) -> TrainState:
    seq = np.random.SeedSequence(config.seed)
    init_seed, run_seed = seq.spawn(2)
    gtg, ttg = nn.build_default_nets(config.net_config(), np.random.default_rng(init_seed), dtype)
    return TrainState(
        config=config,
        gtg=gtg,
        ttg=ttg,
        opt_gtg_gen=AdamState(),
        opt_gtg_disc=AdamState(),
        opt_ttg_gen=AdamState(),
        opt_ttg_disc=AdamState(),
        rng=np.random.default_rng(run_seed),
    )


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

def _snapshot(state: TrainState):
    params = [(p.data, p.data.copy()) for _, p in state.named_params()]
    stats = [(arr, arr.copy()) for _, arr in state.named_state_arrays()]
    opts = [
        (opt, opt.step, {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()})
        for _, opt in state.optimizers()
    ]
    return params, stats, opts, state.rng.bit_generator.state


def _restore(state: TrainState, snap) -> None:
    params, stats, opts, rng_state = snap
    for live, saved in params:
        live[...] = saved
    for live, saved in stats:
        live[...] = saved
    for opt, step, m, v in opts:
        opt.step, opt.m, opt.v = step, m, v
    state.rng.bit_generator.state = rng_state


def _batch_stroke_weights(warped: np.ndarray, c_weight: float) -> np.ndarray:
    """Per-sample area-balanced weights from binarized warped glyphs."""
    out = np.ones_like(warped, dtype=np.float64)
    for i in range(warped.shape[0]):
        img = Image(np.clip(warped[i, 0].astype(np.float64), 0.0, 1.0))
        w = lo.stroke_weight(binarize(img, "otsu"), c_weight)
        out[i, 0] = w.values
    return out


def train_step(state: TrainState, x_batch: np.ndarray, y_batch: np.ndarray) -> LossReport:
    """One associate step over an unpaired clean/photo batch pair.

    A non-finite value in any phase restores the pre-step state and raises
    ``TrainingError`` naming the phase.
    """
    cfg = state.config
    snap = _snapshot(state)
    t = state.iteration
    lr_gtg = LrSchedule(cfg.lr_gtg, cfg.constant_iters, cfg.decay_iters).rate(t)
    lr_ttg = LrSchedule(cfg.lr_ttg, cfg.constant_iters, cfg.decay_iters).rate(t)
    snr_cfg = SnrConfig(cfg.m_band)
    dtype = x_batch.dtype
    bsz = x_batch.shape[0]
    z1 = state.rng.standard_normal((bsz, state.noise_dim)).astype(dtype)
    z2 = state.rng.standard_normal((bsz, state.noise_dim)).astype(dtype)

    phase = "gtg_generator"
    try:
        x_in = Tensor(x_batch)
        y_in = Tensor(y_batch)
        z1_t, z2_t = Tensor(z1), Tensor(z2)

        # (1) shape generator side
        feat = state.gtg.encoder(x_in, nn.TRAIN)
        raw1 = state.gtg.predictor(feat + z1_t, nn.TRAIN)
        theta1 = nn.decode_warp_params(raw1, cfg.n_ctrl)
        grid = ad.warp_grid(theta1, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg.tps_reg)
        warped = ad.grid_sample(x_in, grid)
        image_rec = state.gtg.recon_image(theta1, nn.TRAIN)
        noise_rec = state.gtg.recon_noise(theta1, nn.TRAIN)
        snr, alpha, rer_value, rer_clamped = lo.snr_loss(x_in, image_rec, z1_t, noise_rec, snr_cfg)
        if cfg.enable_diversity:
            raw2 = state.gtg.predictor(feat + z2_t, nn.FROZEN)
            theta2 = nn.decode_warp_params(raw2, cfg.n_ctrl)
            div = lo.diversity_loss(theta1, theta2)
        else:
            div = Tensor(np.zeros((), dtype=dtype))
        adv = lo.gtg_gen_loss(state.gtg.disc, warped, mode=nn.FROZEN)
        gtg_gen_total = adv + snr + div
        gtg_gen_total.backward()
        ad.adam_step(state.gtg.generator_params(), state.opt_gtg_gen, lr_gtg)
        state.zero_all_grads()

        # (2) shape discriminator: recomputed warp and destylized photos, no gradient
        phase = "gtg_discriminator"
        with ad.no_grad():
            feat2 = state.gtg.encoder(x_in, nn.FROZEN)
            raw_d = state.gtg.predictor(feat2 + z1_t, nn.FROZEN)
            theta_d = nn.decode_warp_params(raw_d, cfg.n_ctrl)
            grid_d = ad.warp_grid(theta_d, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg.tps_reg)
            warped_d = ad.grid_sample(x_in, grid_d)
            destylized = state.ttg.gen_clean(y_in, nn.FROZEN)
        gtg_disc_total = lo.gtg_disc_loss(
            state.gtg.disc, warped_d.detach(), destylized.detach(), mode=nn.TRAIN
        )
        gtg_disc_total.backward()
        ad.adam_step(state.gtg.disc_params(), state.opt_gtg_disc, lr_gtg)
        state.zero_all_grads()

        # (3) texture generators: the warped batch enters detached
        phase = "ttg_generators"
        x_t = warped_d.detach()
        if cfg.enable_stroke_weight:
            weights = _batch_stroke_weights(x_t.data, cfg.c_weight)
        else:
            weights = np.ones_like(x_t.data, dtype=np.float64)

        ttg_gen_total, parts = lo.ttg_gen_loss(
            state.ttg, x_t, y_in, weights, cfg.lam, gen_mode=nn.TRAIN, disc_mode=nn.FROZEN
        )
        ttg_gen_total.backward()
        ad.adam_step(state.ttg.generator_params(), state.opt_ttg_gen, lr_ttg)
        state.zero_all_grads()

        # (4) texture discriminators against the detached phase-3 fakes
        phase = "ttg_discriminators"
        ttg_disc_total = lo.ttg_disc_loss(
            state.ttg, parts["fake_y"].detach(), parts["fake_x"].detach(), x_in, y_in, mode=nn.TRAIN
        )
        ttg_disc_total.backward()
        ad.adam_step(state.ttg.disc_params(), state.opt_ttg_disc, lr_ttg)
        state.zero_all_grads()
    except ad.NonFiniteError as exc:
        _restore(state, snap)
        raise TrainingError(f"non-finite loss in phase '{phase}' at iteration {t}: {exc}") from exc

    report = LossReport(
        iteration=t,
        gtg_gen=float(gtg_gen_total.data),
        gtg_disc=float(gtg_disc_total.data),
        ttg_gen=float(ttg_gen_total.data),
        ttg_disc=float(ttg_disc_total.data),
        snr=float(snr.data),
        rer=rer_value,
        alpha=alpha,
        diversity=float(div.data),
        cycle=parts["cycle"],
        rer_clamped=rer_clamped,
    )
    if not report.values_finite():
        _restore(state, snap)
        raise TrainingError(f"non-finite loss report at iteration {t}")
    state.iteration = t + 1
    return report


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def _materialize(dataset, image_size: int, name: str) -> np.ndarray:
    if len(dataset) == 0:
        raise TrainingError(f"{name} dataset is empty")
    if getattr(dataset, "image_size", image_size) != image_size:
        raise TrainingError(
            f"{name} dataset images are {dataset.image_size}px but the config wants {image_size}px"
        )
    arr = np.stack([np.asarray(dataset.image(i), dtype=np.float32) for i in range(len(dataset))])
    if arr.shape[1:] != (image_size, image_size):
        raise TrainingError(
            f"{name} dataset images are {arr.shape[1:]} but the config wants {image_size}px squares"
        )
    return arr[:, None, :, :]


def train(
    config: TrainConfig,
    sc_dataset,
    pc_dataset,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    log_lines: list[str] | None = None,
    progress=None,
) -> tuple[TrainState, list[LossReport]]:
    """Run (or resume) the full schedule with seed-deterministic batch sampling.

    Writes periodic checkpoints plus ``latest.ckpt`` and a JSON-lines loss log
    when ``out_dir`` is given. Returns the final state and all step reports.
    """
    x_all = _materialize(sc_dataset, config.image_size, "clean-glyph")
    y_all = _materialize(pc_dataset, config.image_size, "photo")
    if state is None:
        state = init_state(config)
    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "train_log.jsonl", "a", encoding="utf-8")
    reports: list[LossReport] = []
    try:
        while state.iteration < config.total_iters:
            idx_x = state.rng.integers(0, x_all.shape[0], config.batch_size)
            idx_y = state.rng.integers(0, y_all.shape[0], config.batch_size)
            try:
                report = train_step(state, x_all[idx_x], y_all[idx_y])
            except TrainingError:
                if out_path is not None:
                    save_checkpoint(state, out_path / "aborted.ckpt")
                raise
            reports.append(report)
            line = report.to_json_line()
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if log_lines is not None:
                log_lines.append(line)
            if progress is not None:
                progress(report)
            if out_path is not None and (
                state.iteration % config.checkpoint_every == 0 or state.iteration == config.total_iters
            ):
                save_checkpoint(state, out_path / f"ckpt_{state.iteration:06d}.ckpt")
                save_checkpoint(state, out_path / "latest.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    return state, reports


def generate(state: TrainState, image: Image, num_samples: int, seed: int) -> list[Image]:
    """One-to-many generation: each draw warps the glyph, then adds texture.

    Deterministic for a fixed seed; outputs keep the input's dimensions.
    """
    cfg = state.config
    in_h, in_w = image.height, image.width
    work = image
    if (in_h, in_w) != (cfg.image_size, cfg.image_size):
        work = resize(image, cfg.image_size, cfg.image_size)
    x = work.data.astype(np.float32)[None, None]
    rng = np.random.default_rng(seed)
    outputs: list[Image] = []
    for _ in range(num_samples):
        z = rng.standard_normal((1, state.noise_dim)).astype(np.float32)
        with ad.no_grad():
            feat = state.gtg.encoder(Tensor(x), nn.EVAL)
            raw = state.gtg.predictor(feat + Tensor(z), nn.EVAL)
            theta = nn.decode_warp_params(raw, cfg.n_ctrl)
            grid = ad.warp_grid(theta, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg.tps_reg)
            warped = ad.grid_sample(Tensor(x), grid)
            styled = state.ttg.gen_photo(warped, nn.EVAL)
        out = Image(np.clip(styled.data[0, 0].astype(np.float64), 0.0, 1.0))
        if (in_h, in_w) != (cfg.image_size, cfg.image_size):
            out = resize(out, in_h, in_w)
        outputs.append(out)
    return outputs


def warp_only(state: TrainState, image: Image, seed: int) -> Image:
    """The shape half alone (no texture), for inspecting learned warps."""
    cfg = state.config
    work = image
    if (image.height, image.width) != (cfg.image_size, cfg.image_size):
        work = resize(image, cfg.image_size, cfg.image_size)
    x = work.data.astype(np.float32)[None, None]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, state.noise_dim)).astype(np.float32)
    with ad.no_grad():
        feat = state.gtg.encoder(Tensor(x), nn.EVAL)
        raw = state.gtg.predictor(feat + Tensor(z), nn.EVAL)
        theta = nn.decode_warp_params(raw, cfg.n_ctrl)
        grid = ad.warp_grid(theta, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg.tps_reg)
        warped = ad.grid_sample(Tensor(x), grid)
    return Image(np.clip(warped.data[0, 0].astype(np.float64), 0.0, 1.0))


def cycle_foreground_error(state: TrainState, images: np.ndarray, seed: int = 0) -> float:
    """Mean cycle reconstruction error over stroke pixels of warped glyphs.

    Uses fixed noise draws so runs with different configs stay comparable.
    """
    cfg = state.config
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((x.shape[0], state.noise_dim)).astype(np.float32)
    with ad.no_grad():
        feat = state.gtg.encoder(Tensor(x), nn.EVAL)
        raw = state.gtg.predictor(feat + Tensor(z), nn.EVAL)
        theta = nn.decode_warp_params(raw, cfg.n_ctrl)
        grid = ad.warp_grid(theta, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg.tps_reg)
        warped = ad.grid_sample(Tensor(x), grid)
        rec = state.ttg.gen_clean(state.ttg.gen_photo(warped, nn.EVAL), nn.EVAL)
    err_sum = 0.0
    n_fg = 0
    for i in range(x.shape[0]):
        img = Image(np.clip(warped.data[i, 0].astype(np.float64), 0.0, 1.0))
        mask = binarize(img, "otsu").bits
        if mask.any():
            err_sum += float(np.abs(rec.data[i, 0] - warped.data[i, 0])[mask].sum())
            n_fg += int(mask.sum())
    if n_fg == 0:
        return 0.0
    return err_sum / n_fg


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {0: np.float32, 1: np.float64}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_record(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.append(struct.pack("<H", len(nb)))
    buf.append(nb)
    buf.append(struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    buf.append(struct.pack("<B", _DTYPE_IDS[arr.dtype]))
    buf.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_record(view: memoryview, pos: int) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack_from("<H", view, pos)
    pos += 2
    name = bytes(view[pos : pos + nlen]).decode("utf-8")
    pos += nlen
    (ndim,) = struct.unpack_from("<B", view, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}I", view, pos) if ndim else ()
    pos += 4 * ndim
    (code,) = struct.unpack_from("<B", view, pos)
    pos += 1
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(view, dtype=dtype, count=count, offset=pos).reshape(shape)
    pos += arr.nbytes
    return name, arr.astype(_DTYPE_CODES[code]), pos


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Versioned container: config JSON, parameter/state records, optimizer
    moments, RNG state, iteration counter."""
    buf: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg_json = state.config.to_json().encode("utf-8")
    buf.append(struct.pack("<I", len(cfg_json)))
    buf.append(cfg_json)

    records: list[tuple[str, np.ndarray]] = []
    records.extend((f"param/{n}", p.data) for n, p in state.named_params())
    records.extend((f"state/{n}", arr) for n, arr in state.named_state_arrays())
    opt_meta = {}
    for group, opt in state.optimizers():
        opt_meta[group] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        for kind, table in (("m", opt.m), ("v", opt.v)):
            records.extend((f"opt/{group}/{kind}/{n}", arr) for n, arr in sorted(table.items()))
    buf.append(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)

    trailer = json.dumps({
        "optimizers": opt_meta,
        "rng": _rng_state_jsonable(state.rng.bit_generator.state),
    }).encode("utf-8")
    buf.append(struct.pack("<I", len(trailer)))
    buf.append(trailer)
    buf.append(struct.pack("<Q", state.iteration))
    Path(path).write_bytes(b"".join(buf))


def _rng_state_jsonable(st):
    if isinstance(st, dict):
        return {k: _rng_state_jsonable(v) for k, v in st.items()}
    if isinstance(st, np.ndarray):
        return {"__ndarray__": st.tolist(), "dtype": str(st.dtype)}
    if isinstance(st, (np.integer,)):
        return int(st)
    return st


def _rng_state_restore(st):
    if isinstance(st, dict):
        if "__ndarray__" in st:
            return np.asarray(st["__ndarray__"], dtype=st["dtype"])
        return {k: _rng_state_restore(v) for k, v in st.items()}
    return st


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", view, pos)
    pos += 4
    config = TrainConfig.from_json(bytes(view[pos : pos + cfg_len]).decode("utf-8"))
    pos += cfg_len
    (n_records,) = struct.unpack_from("<I", view, pos)
    pos += 4
    records: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name, arr, pos = _read_record(view, pos)
        records[name] = arr
    (tlen,) = struct.unpack_from("<I", view, pos)
    pos += 4
    trailer = json.loads(bytes(view[pos : pos + tlen]).decode("utf-8"))
    pos += tlen
    (iteration,) = struct.unpack_from("<Q", view, pos)

    state = init_state(config)
    for name, p in state.named_params():
        key = f"param/{name}"
        if key not in records:
            raise TrainingError(f"{path}: missing parameter record {key}")
        if records[key].shape != p.data.shape:
            raise TrainingError(f"{path}: shape mismatch for {key}")
        p.data[...] = records[key].astype(p.data.dtype)
    for name, arr in state.named_state_arrays():
        key = f"state/{name}"
        if key not in records:
            raise TrainingError(f"{path}: missing state record {key}")
        arr[...] = records[key].astype(arr.dtype)
    for group, opt in state.optimizers():
        meta = trailer["optimizers"][group]
        opt.step = int(meta["step"])
        opt.beta1, opt.beta2, opt.eps = meta["beta1"], meta["beta2"], meta["eps"]
        prefix_m, prefix_v = f"opt/{group}/m/", f"opt/{group}/v/"
        opt.m = {k[len(prefix_m):]: v.copy() for k, v in records.items() if k.startswith(prefix_m)}
        opt.v = {k[len(prefix_v):]: v.copy() for k, v in records.items() if k.startswith(prefix_v)}
    state.rng.bit_generator.state = _rng_state_restore(trailer["rng"])
    state.iteration = int(iteration)
    return state
