"""End-to-end orchestration: two-stage training, generation, evaluation and
ablation sweeps.

Every random decision of stage-2 step k is drawn from a stream keyed by
(seed, step index), so a resumed run reproduces the unresumed run's loss log
bit for bit; nothing depends on accumulated generator state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autograd import Tensor, add, scale
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codec, CodecConfig, train_codec
from .conditioning import (ConditionBundle, ConditioningParams, build_condition,
                           build_foreground_tokens, crop_and_pad,
                           downsample_mask, fafim_integrate, init_conditioning,
                           localized_masked_pooling, reconstruct_background,
                           retrieve_background, slic_superpixels)
from .config import RunConfig, config_to_text, parse_config
from .dataset import ImageSample, load_dataset, load_samples
from .diffusion import (Denoiser, DenoiserConfig, LossBreakdown, LossConfig,
                        bgrec_loss, fadl_loss, foreground_weight,
                        forward_diffuse, make_schedule, sample_latent,
                        total_loss)
from .errors import InputError, InvariantError, NumericError
from .imageops import bilinear_resize, nearest_resize, to_uint8
from .metrics import MetricReport, evaluate_dataset, is_small_object
from .optim import Adam
from .params import ParamStore
from .rng import Rng, name_seed

LOG_HEADER = "step,fadl_fg,fadl_bg,bgrec,total,w,t"


# -- per-sample static context ------------------------------------------------


@dataclass
class StaticCondition:
    """Everything the frozen codec derives from one sample; cached because no
    trainable parameter can change it."""

    name: str
    latent_fg: np.ndarray     # c^f = E(I * fg), (h, w, 3)
    mask_d: np.ndarray        # m^d at latent resolution, 1 = background
    fg_d: np.ndarray          # 1 - m^d
    pooled_fg: np.ndarray     # superpixel-pooled cropped-foreground features (S, 3)
    z0: np.ndarray            # E(I), (h, w, 3)
    fg_ratio: float


def prepare_static(sample: ImageSample, codec: Codec, cfg: RunConfig) -> StaticCondition:
    factor = codec.cfg.factor
    fg_model = (1 - sample.mask_m).astype(np.float32)
    latent_fg = codec.encode(sample.image * fg_model[:, :, None])
    mask_d = downsample_mask(sample.mask_m, factor)
    crop = crop_and_pad(sample.source_image, sample.source_fg, cfg.image_size)
    crop_feat = codec.encode(crop.image * crop.fg_mask[:, :, None].astype(np.float32))
    crop_m = (1 - crop.fg_mask).astype(np.uint8)
    fg_cd = 1 - downsample_mask(crop_m, factor)
    assignment = slic_superpixels(crop_feat, fg_cd, cfg.superpixels,
                                  compactness=cfg.slic_compactness,
                                  iterations=cfg.slic_iterations, seed=cfg.seed)
    pooled = localized_masked_pooling(crop_feat, assignment)
    z0 = codec.encode(sample.image)
    return StaticCondition(name=sample.name, latent_fg=latent_fg, mask_d=mask_d,
                           fg_d=(1 - mask_d).astype(np.uint8), pooled_fg=pooled,
                           z0=z0, fg_ratio=sample.fg_ratio)


def build_bundle(static: StaticCondition, cond: ConditioningParams,
                 codebook: np.ndarray, latent_size: int) -> ConditionBundle:
    """Run the trainable condition path for one sample."""
    retrieved = retrieve_background(static.pooled_fg, codebook, cond)
    tokens = build_foreground_tokens(static.latent_fg, static.fg_d, cond)
    integrated = fafim_integrate(tokens, retrieved, cond)
    z_rec = reconstruct_background(integrated, latent_size, cond)
    return build_condition(static.latent_fg, z_rec, static.mask_d)


# -- trainable state -------------------------------------------------------------


class TrainState:
    """Frozen codec plus all trainable stage-2 parameters and optimizer."""

    def __init__(self, cfg: RunConfig, codec: Codec):
        cfg.validate()
        if not codec.frozen:
            raise InvariantError("codec must be frozen before diffusion training")
        self.cfg = cfg
        self.codec = codec
        self.dtype = np.float32 if cfg.precision == "f32" else np.float64
        latent = cfg.image_size // codec.cfg.factor
        self.latent_size = latent
        self.store = ParamStore()
        rng = Rng(cfg.seed, "model-init")
        self.cond = init_conditioning(
            self.store, rng.split("cond"), latent, cfg.patch_size, cfg.token_dim,
            cfg.attn_heads, dtype=self.dtype)
        self.denoiser = Denoiser(
            self.store, rng.split("den"),
            DenoiserConfig(latent_size=latent, base_width=cfg.unet_base_width,
                           time_dim=cfg.time_embed_dim),
            dtype=self.dtype)
        self.opt = Adam(self.store, lr=cfg.stage2_lr,
                        betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        self.schedule = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max)
        self.loss_cfg = LossConfig(alpha=cfg.alpha, fadl_lambda=cfg.fadl_lambda,
                                   weighting_fn=cfg.weighting_fn,
                                   mask_polarity=cfg.mask_polarity)
        self.loss_cfg.validate()
        self.step = 0
        codec_names = set(codec.tensors)
        model_names = set(self.store.names())
        overlap = {n for n in model_names if n in codec_names}
        if overlap:
            raise InvariantError(f"codec and model parameter names overlap: {overlap}")

    # -- loss assembly ---------------------------------------------------------

    def sample_loss(self, static: StaticCondition, t: int, eps: np.ndarray):
        """Loss graph for one sample at a fixed (t, eps) draw."""
        bundle = build_bundle(static, self.cond, self.codec.codebook, self.latent_size)
        z_t = forward_diffuse(static.z0.astype(self.dtype), t, eps, self.schedule)
        eps_hat = self.denoiser.predict_noise(z_t, bundle.condition, t,
                                              self.schedule.timesteps)
        w = foreground_weight(static.fg_ratio, self.loss_cfg.alpha,
                              self.loss_cfg.weighting_fn)
        fg_term, bg_term = fadl_loss(eps, eps_hat, static.mask_d, w,
                                     self.loss_cfg.mask_polarity)
        rec = bgrec_loss(bundle.z_rec, static.z0.astype(self.dtype), static.mask_d,
                         self.loss_cfg.mask_polarity)
        tot = total_loss(fg_term, bg_term, rec, self.loss_cfg.fadl_lambda)
        breakdown = LossBreakdown(fadl_fg=float(fg_term.data),
                                  fadl_bg=float(bg_term.data),
                                  bgrec=float(rec.data), w=w,
                                  fadl_lambda=self.loss_cfg.fadl_lambda)
        return tot, breakdown

    def batch_step(self, statics: list[StaticCondition], step_index: int):
        """One optimizer step over a batch drawn for this step index. Returns
        the batch-mean LossBreakdown and mean t (for logging)."""
        rng = Rng(self.cfg.seed, f"stage2/step{step_index}")
        picks = rng.integers(0, len(statics), shape=self.cfg.stage2_batch)
        total = None
        acc = dict(fadl_fg=0.0, fadl_bg=0.0, bgrec=0.0, w=0.0)
        t_sum = 0
        for b, i in enumerate(picks):
            srng = rng.split(f"b{b}")
            t = srng.integers(1, self.schedule.timesteps + 1)
            eps = srng.normal((self.latent_size, self.latent_size, 3), dtype=self.dtype)
            tot, br = self.sample_loss(statics[int(i)], t, eps)
            total = tot if total is None else add(total, tot)
            acc["fadl_fg"] += br.fadl_fg
            acc["fadl_bg"] += br.fadl_bg
            acc["bgrec"] += br.bgrec
            acc["w"] += br.w
            t_sum += t
        n = len(picks)
        total = scale(total, 1.0 / n)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at step {step_index}; aborting training"
            )
        self.store.zero_grads()
        total.backward()
        self.opt.step()
        self.step = step_index + 1
        mean = LossBreakdown(fadl_fg=acc["fadl_fg"] / n, fadl_bg=acc["fadl_bg"] / n,
                             bgrec=acc["bgrec"] / n, w=acc["w"] / n,
                             fadl_lambda=self.loss_cfg.fadl_lambda)
        return mean, t_sum / n

    def train_step(self, sample: ImageSample, rng: Rng) -> LossBreakdown:
        """Single-sample training step: draw (t, eps), backprop, optimize."""
        static = prepare_static(sample, self.codec, self.cfg)
        t = rng.integers(1, self.schedule.timesteps + 1)
        eps = rng.normal((self.latent_size, self.latent_size, 3), dtype=self.dtype)
        tot, breakdown = self.sample_loss(static, t, eps)
        if not np.isfinite(tot.data):
            raise NumericError("non-finite loss in train_step")
        self.store.zero_grads()
        tot.backward()
        self.opt.step()
        self.step += 1
        return breakdown

    # -- persistence ------------------------------------------------------------

    def checkpoint_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, t in self.codec.tensors.items():
            out[f"codec/{name}"] = t.data
        for name, t in self.store.items():
            out[f"model/{name}"] = t.data
            out[f"opt/m/{name}"] = self.opt.m[name]
            out[f"opt/v/{name}"] = self.opt.v[name]
        out["meta/step"] = np.asarray([self.step], dtype=np.float64)
        out["meta/adam_t"] = np.asarray([self.opt.t], dtype=np.float64)
        return out

    def save(self, path: str) -> None:
        save_checkpoint(path, config_to_text(self.cfg), self.checkpoint_tensors())

    @classmethod
    def load(cls, path: str) -> "TrainState":
        config_text, tensors = load_checkpoint(path)
        cfg = parse_config(config_text)
        codec = restore_codec(cfg, tensors)
        state = cls(cfg, codec)
        for name, t in state.store.items():
            key = f"model/{name}"
            if key not in tensors:
                raise InputError(f"checkpoint missing tensor {key}")
            _assign(t.data, tensors[key], key)
            np.copyto(state.opt.m[name], tensors[f"opt/m/{name}"])
            np.copyto(state.opt.v[name], tensors[f"opt/v/{name}"])
        state.step = int(tensors["meta/step"][0])
        state.opt.t = int(tensors["meta/adam_t"][0])
        return state


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise InputError(
            f"checkpoint tensor {name} has shape {src.shape}, expected {dst.shape}"
        )
    np.copyto(dst, src.astype(dst.dtype))


def codec_config(cfg: RunConfig) -> CodecConfig:
    return CodecConfig(image_size=cfg.image_size,
                       downsample_stages=cfg.downsample_stages,
                       codebook_size=cfg.codebook_size,
                       base_width=cfg.codec_base_width)


def restore_codec(cfg: RunConfig, tensors: dict[str, np.ndarray]) -> Codec:
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    codec = Codec(codec_config(cfg), Rng(cfg.seed, "codec/init"), dtype=dtype)
    for name, t in codec.tensors.items():
        key = f"codec/{name}"
        if key not in tensors:
            raise InputError(f"checkpoint missing tensor {key}")
        _assign(t.data, tensors[key], key)
    codec.freeze()
    return codec


# -- training entry points ----------------------------------------------------------


def run_stage1(cfg: RunConfig, samples: list[ImageSample]) -> Codec:
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    codec, _ = train_codec([s.image for s in samples], codec_config(cfg),
                           seed=cfg.seed, steps=cfg.stage1_steps,
                           batch_size=cfg.stage1_batch, lr=cfg.stage1_lr,
                           commitment_beta=cfg.commitment_beta,
                           revive_after=cfg.codebook_revive_after, dtype=dtype)
    return codec


def _format_row(step: int, br: LossBreakdown, t_mean: float) -> str:
    return ",".join([str(step), repr(br.fadl_fg), repr(br.fadl_bg),
                     repr(br.bgrec), repr(br.total), repr(br.w), repr(t_mean)])


def run_stage2(state: TrainState, samples: list[ImageSample],
               out_dir: str, total_steps: int | None = None) -> str:
    """Stage-2 loop with CSV logging and periodic checkpoints. Appends to an
    existing log when resuming. Returns the final checkpoint path."""
    cfg = state.cfg
    steps = cfg.stage2_steps if total_steps is None else total_steps
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "loss_log.csv")
    final_path = os.path.join(out_dir, "checkpoint.camf")
    statics = [prepare_static(s, state.codec, cfg) for s in samples]
    codec_crc = state.codec.checksum()

    mode = "a" if state.step > 0 and os.path.exists(log_path) else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(LOG_HEADER + "\n")
        for step in range(state.step, steps):
            br, t_mean = state.batch_step(statics, step)
            log.write(_format_row(step, br, t_mean) + "\n")
            if (step + 1) % cfg.checkpoint_interval == 0 or step + 1 == steps:
                if state.codec.checksum() != codec_crc:
                    raise InvariantError("frozen codec changed during stage 2")
                state.save(final_path)
    if state.codec.checksum() != codec_crc:
        raise InvariantError("frozen codec changed during stage 2")
    state.save(final_path)
    return final_path


def run_training(cfg: RunConfig, resume_from: str | None = None) -> str:
    """Full pipeline: load data, stage 1 (unless resuming), stage 2.

    When resuming, the checkpoint's config snapshot wins over the passed
    config so the continued run cannot diverge from the original one.
    """
    if resume_from is not None:
        state = TrainState.load(resume_from)
        cfg = state.cfg
        samples = load_samples(load_dataset(cfg.data_dir), cfg.image_size)
    else:
        samples = load_samples(load_dataset(cfg.data_dir), cfg.image_size)
        codec = run_stage1(cfg, samples)
        state = TrainState(cfg, codec)
    return run_stage2(state, samples, cfg.out_dir)


# -- generation and evaluation ---------------------------------------------------------


def make_sample(name: str, source_image: np.ndarray, source_fg: np.ndarray,
                model_size: int) -> ImageSample:
    if source_fg.sum() == 0:
        raise InputError("mask selects zero foreground pixels")
    image = bilinear_resize(source_image.astype(np.float32), model_size, model_size)
    fg_model = nearest_resize(source_fg.astype(np.uint8), model_size, model_size)
    if fg_model.sum() == 0:
        ys, xs = np.nonzero(source_fg)
        fg_model[min(int(ys.mean() * model_size / source_fg.shape[0]), model_size - 1),
                 min(int(xs.mean() * model_size / source_fg.shape[1]), model_size - 1)] = 1
    return ImageSample(name=name, source_image=source_image.astype(np.float32),
                       source_fg=source_fg.astype(np.uint8), image=image,
                       mask_m=(1 - fg_model).astype(np.uint8),
                       fg_ratio=float(source_fg.sum()) / source_fg.size)


def generate_image(state: TrainState, sample: ImageSample, seed: int) -> np.ndarray:
    """Sample a camouflaged image for one foreground object; [0,1] floats."""
    static = prepare_static(sample, state.codec, state.cfg)
    bundle = build_bundle(static, state.cond, state.codec.codebook, state.latent_size)
    z = sample_latent(bundle.condition.data, state.denoiser, state.schedule,
                      Rng(seed, "generate"))
    return state.codec.decode(z)


def evaluate_run(state: TrainState, data_dir: str, out_dir: str,
                 report_path: str | None = None) -> MetricReport:
    """Generate one image per dataset sample (seed derived from its name),
    compare against the originals at model resolution, write the report."""
    manifest = load_dataset(data_dir)
    samples = load_samples(manifest, state.cfg.image_size)
    gen_dir = os.path.join(out_dir, "generated")
    ref_dir = os.path.join(out_dir, "reference")
    os.makedirs(gen_dir, exist_ok=True)
    os.makedirs(ref_dir, exist_ok=True)
    masks: dict[str, np.ndarray] = {}
    small_flags: dict[str, bool] = {}
    for s in samples:
        img = generate_image(state, s, seed=name_seed(s.name))
        Image.fromarray(to_uint8(img), "RGB").save(os.path.join(gen_dir, f"{s.name}.png"))
        Image.fromarray(to_uint8(s.image), "RGB").save(os.path.join(ref_dir, f"{s.name}.png"))
        masks[s.name] = (1 - s.mask_m).astype(np.uint8)
        small_flags[s.name] = is_small_object(s.source_fg, *s.source_fg.shape)
    report = evaluate_dataset(gen_dir, ref_dir, masks, small_flags)
    if report_path is None:
        report_path = os.path.join(out_dir, "metrics.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
        fh.write("\n")
        fh.write(report.to_table())
    return report


def foreground_residual_mse(state: TrainState, statics: list[StaticCondition],
                            n_probes: int, seed: int) -> float:
    """Unweighted foreground denoising error, averaged over fixed probe draws;
    used to compare weighting schemes on equal footing."""
    rng = Rng(seed, "fg-eval")
    total = 0.0
    count = 0.0
    for si, st in enumerate(statics):
        srng = rng.split(f"s{si}")
        bundle = build_bundle(st, state.cond, state.codec.codebook, state.latent_size)
        cond = bundle.condition.data
        fg3 = np.repeat(st.fg_d[:, :, None].astype(state.dtype), 3, axis=2)
        for p in range(n_probes):
            prng = srng.split(f"p{p}")
            t = prng.integers(1, state.schedule.timesteps + 1)
            eps = prng.normal((state.latent_size, state.latent_size, 3),
                              dtype=state.dtype)
            z_t = forward_diffuse(st.z0.astype(state.dtype), t, eps, state.schedule)
            eps_hat = state.denoiser.predict_noise(
                z_t, Tensor(cond), t, state.schedule.timesteps).data
            total += float((fg3 * (eps - eps_hat) ** 2).sum())
            count += float(fg3.sum())
    if count == 0:
        raise InputError("no foreground cells in evaluation set")
    return total / count


# -- ablation harness ----------------------------------------------------------------


SWEEPS = {
    "weighting_fn": ["paper", "linear", "log", "reciprocal"],
    "alpha": [0.25, 0.125, 0.0625],
    "patch_size": [2, 4, 8],
}


def run_ablation(cfg: RunConfig, data_dir: str, param: str, values=None,
                 steps: int | None = None) -> str:
    """Train one stage-2 arm per parameter value (shared stage-1 codec) and
    return a comparison table of trailing losses and foreground residuals."""
    if param not in SWEEPS:
        from .errors import ConfigError
        raise ConfigError(f"unknown sweep parameter {param!r}; one of {sorted(SWEEPS)}")
    values = SWEEPS[param] if values is None else values
    manifest = load_dataset(data_dir)
    samples = load_samples(manifest, cfg.image_size)
    codec = run_stage1(cfg, samples)
    n_steps = steps if steps is not None else cfg.stage2_steps
    rows = []
    for value in values:
        arm_cfg = parse_config(config_to_text(cfg))
        setattr(arm_cfg, param, value)
        arm_cfg.validate()
        state = TrainState(arm_cfg, codec)
        statics = [prepare_static(s, codec, arm_cfg) for s in samples]
        tail = []
        for step in range(n_steps):
            br, _ = state.batch_step(statics, step)
            tail.append(br.total)
        trailing = float(np.mean(tail[-max(1, n_steps // 10):]))
        fg_mse = foreground_residual_mse(state, statics, n_probes=4, seed=cfg.seed)
        rows.append((value, trailing, fg_mse))
    header = f"{param:>14} | trailing_loss | fg_residual_mse"
    lines = [header, "-" * len(header)]
    for value, trailing, fg_mse in rows:
        lines.append(f"{value!s:>14} | {trailing:13.6f} | {fg_mse:15.6f}")
    return "\n".join(lines) + "\n"
