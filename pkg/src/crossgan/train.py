"""Training regimes: single-domain GAN, combined-dataset GAN, coupled GAN, and
domain adaptation with variant flags.

Every regime alternates a discriminator ascent phase with a generator descent
phase; the domain-adaptation step runs its four sub-steps strictly in order
(discriminator, generators, classifier-on-real, classifier-on-fake), with the
classifier sub-steps gated by the variant flags.

Randomness is counter-based: data order, z draws, and the fixed sample-dump z
are pure functions of (seed, iteration), so checkpoints only need seeds and
the iteration counter to resume bitwise.
"""

from __future__ import annotations

import math
import os
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from .corpus import Corpus, ImageBatch, minibatch_stream
from .errors import CrossganError, NonFiniteLossError
from .losses import LossReport, da_energy, da_l1, da_l2, gan_loss, generator_objective
from .nets import (
    CoGan,
    CoupledSpec,
    DannModel,
    DannSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    build_cogan,
    build_dann,
    build_discriminator,
    build_generator,
    feature_width,
)
from .optim import make_optimizer, merge_params

REGIMES = ("single", "combined", "cogan", "dann")

# Stream tags for counter-based z derivation.
_Z_STREAM_S = 0
_Z_STREAM_L = 1
_Z_FIXED = 424242


def deterministic_requested() -> bool:
    return os.environ.get("CROSSGAN_DETERMINISTIC") == "1"


def apply_determinism(enabled: bool):
    # Bitwise reproducibility is only guaranteed single-threaded.
    if enabled or deterministic_requested():
        torch.set_num_threads(1)


@dataclass
class TrainConfig:
    regime: str = "single"
    domain: str | None = None
    resolution: int = 64
    z_dim: int = 1024
    base_channels: int = 128
    classifier_width: int = 256
    batch_size: int = 16
    learning_rate: float = 2e-4
    iterations: int = 1000
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    saturating: bool = False
    variant: str | None = None
    train_classifier_real: bool = True
    train_classifier_fake: bool = True
    lazy_fake_start_iteration: int = 0
    seed: int = 0
    data_seed: int | None = None
    z_seed: int | None = None
    init_seed: int | None = None
    checkpoint_every: int = 0  # 0 -> once per epoch
    sample_every: int = 0      # 0 -> once per epoch
    sample_count: int = 16
    keep_last: int = 3
    tie_gen: tuple[str, ...] | None = None
    tie_disc: tuple[str, ...] | None = None
    deterministic: bool = True
    run_dir: str | None = None

    def validate(self):
        if self.regime not in REGIMES:
            raise CrossganError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime == "single" and self.domain not in ("S", "L"):
            raise CrossganError("single regime requires domain S or L")
        if self.learning_rate <= 0:
            raise CrossganError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise CrossganError("batch_size must be >= 2 (batch norm needs it)")
        if self.iterations < 1:
            raise CrossganError("iterations must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise CrossganError(f"unknown optimizer {self.optimizer!r}")
        if self.sample_count > 0:
            side = math.isqrt(self.sample_count)
            if side * side != self.sample_count:
                raise CrossganError("sample_count must be a perfect square")

    def effective_seeds(self) -> tuple[int, int, int]:
        derived = [int(s) for s in np.random.SeedSequence(self.seed).generate_state(3)]
        return (
            self.data_seed if self.data_seed is not None else derived[0],
            self.z_seed if self.z_seed is not None else derived[1],
            self.init_seed if self.init_seed is not None else derived[2],
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("tie_gen", "tie_disc"):
            if d[k] is not None:
                d[k] = list(d[k])
        if d["run_dir"] is not None:
            d["run_dir"] = str(d["run_dir"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        for k in ("tie_gen", "tie_disc"):
            if kwargs.get(k) is not None:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)


VARIANTS = {
    "FullDomainAdaptation": (True, True, 0),
    "NoClassifierTraining": (False, False, 0),
    "NoFakeClassifierTraining": (True, False, 0),
    "NoRealClassifierTraining": (False, True, 0),
    "LazyFakeClassifierTraining": (True, True, None),
}


def variant_of(name: str, iters_per_epoch: int | None = None) -> tuple[bool, bool, int]:
    """Map a variant name to (train_classifier_real, train_classifier_fake, warmup).

    LazyFakeClassifierTraining defaults its warmup to one epoch of iterations.
    """
    if name not in VARIANTS:
        raise CrossganError(
            f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}"
        )
    real, fake, warmup = VARIANTS[name]
    if warmup is None:
        if iters_per_epoch is None:
            raise CrossganError(
                "LazyFakeClassifierTraining needs iters_per_epoch to default its warmup"
            )
        warmup = iters_per_epoch
    return real, fake, warmup


class GanPair(nn.Module):
    GROUPS = ("gen", "disc")

    def __init__(self, gen, disc):
        super().__init__()
        self.gen = gen
        self.disc = disc


def build_models(config: TrainConfig) -> nn.Module:
    _, _, init_seed = config.effective_seeds()
    gen_spec = GeneratorSpec(config.z_dim, config.resolution, config.base_channels)
    disc_spec = DiscriminatorSpec(config.resolution, config.base_channels)
    if config.regime in ("single", "combined"):
        seeds = [int(s) for s in np.random.SeedSequence(init_seed).generate_state(2)]
        return GanPair(build_generator(gen_spec, seeds[0]),
                       build_discriminator(disc_spec, seeds[1]))
    if config.regime == "cogan":
        spec = CoupledSpec(gen_spec, disc_spec, config.tie_gen, config.tie_disc)
        return build_cogan(spec, init_seed)
    if config.regime == "dann":
        spec = DannSpec(gen_spec, disc_spec, config.classifier_width)
        return build_dann(spec, init_seed)
    raise CrossganError(f"unknown regime {config.regime!r}")


def model_groups(model: nn.Module) -> dict[str, nn.Module]:
    return {g: getattr(model, g) for g in type(model).GROUPS}


def build_optimizers(config: TrainConfig, model: nn.Module) -> dict:
    kind, lr = config.optimizer, config.learning_rate
    betas = (config.beta1, config.beta2)

    def opt(groups: dict[str, nn.Module]):
        return make_optimizer(kind, merge_params(groups), lr, betas)

    if isinstance(model, GanPair):
        return {"disc": opt({"disc": model.disc}), "gen": opt({"gen": model.gen})}
    if isinstance(model, CoGan):
        return {
            "disc": opt({"disc_s": model.disc_s, "disc_l": model.disc_l}),
            "gen": opt({"gen_s": model.gen_s, "gen_l": model.gen_l}),
        }
    if isinstance(model, DannModel):
        return {
            "disc": opt({"trunk": model.trunk, "real_head": model.real_head}),
            "gen_s": opt({"gen_s": model.gen_s}),
            "gen_l": opt({"gen_l": model.gen_l}),
            "cls": opt({"trunk": model.trunk, "cls_head": model.cls_head}),
        }
    raise CrossganError(f"no optimizer layout for {type(model).__name__}")


@dataclass
class TrainState:
    config: TrainConfig
    model: nn.Module
    optimizers: dict
    t: int = 0
    last_trace: list[str] = field(default_factory=list)


def build_state(config: TrainConfig) -> TrainState:
    model = build_models(config)
    return TrainState(config, model, build_optimizers(config, model))


def z_batch(z_seed: int, iteration: int, m: int, z_dim: int,
            stream: int = _Z_STREAM_S) -> torch.Tensor:
    """Uniform(-1, 1) z drawn from a counter-based stream."""
    rng = np.random.default_rng([z_seed, stream, iteration])
    return torch.from_numpy(rng.uniform(-1.0, 1.0, (m, z_dim)).astype(np.float32))


def fixed_z(z_seed: int, m: int, z_dim: int) -> torch.Tensor:
    """The held-out z used for every sample dump of a run."""
    return z_batch(z_seed, 0, m, z_dim, stream=_Z_FIXED)


def _to_tensor(batch) -> torch.Tensor:
    if isinstance(batch, ImageBatch):
        return torch.from_numpy(batch.data)
    if isinstance(batch, np.ndarray):
        return torch.from_numpy(batch.astype(np.float32, copy=False))
    return batch


def _check_finite(*reports: LossReport):
    for r in reports:
        if not math.isfinite(r.value):
            raise NonFiniteLossError(f"{r.name} loss is non-finite ({r.value})")


def _minimize(opt, objective: torch.Tensor):
    opt.zero_grad()
    objective.backward()
    opt.step()


def disc_phase(model: GanPair, real: torch.Tensor, z: torch.Tensor, opt) -> tuple[LossReport, torch.Tensor]:
    """Ascent on the discriminator under the full minimax loss; returns the
    report and the (still attached) fake batch for the generator phase."""
    fake = model.gen(z)
    report = gan_loss(model.disc(real).realness, model.disc(fake.detach()).realness)
    _check_finite(report)
    _minimize(opt, -report.tensor)
    return report, fake


def gen_phase(model: GanPair, fake: torch.Tensor, opt, saturating: bool) -> LossReport:
    report = generator_objective(model.disc(fake).realness, saturating)
    _check_finite(report)
    _minimize(opt, report.tensor)
    return report


def gan_step(state: TrainState, real_batch, z) -> dict[str, LossReport]:
    """One alternating step: discriminator ascent, then generator descent
    against the freshly-updated discriminator."""
    if state.config.regime not in ("single", "combined"):
        raise CrossganError(f"gan_step needs a single/combined state, got {state.config.regime!r}")
    real = _to_tensor(real_batch)
    d_report, fake = disc_phase(state.model, real, z, state.optimizers["disc"])
    g_report = gen_phase(state.model, fake, state.optimizers["gen"], state.config.saturating)
    state.t += 1
    return {"L": d_report, "G": g_report}


def cogan_step(state: TrainState, batch_s, batch_l, z_s, z_l) -> dict[str, LossReport]:
    """Coupled step: per-domain losses; tied blocks receive the summed gradient."""
    if state.config.regime != "cogan":
        raise CrossganError("cogan_step needs a cogan state")
    m: CoGan = state.model
    xs, xl = _to_tensor(batch_s), _to_tensor(batch_l)

    fake_s = m.gen_s(z_s)
    fake_l = m.gen_l(z_l)
    rep_s = gan_loss(m.disc_s(xs).realness, m.disc_s(fake_s.detach()).realness)
    rep_l = gan_loss(m.disc_l(xl).realness, m.disc_l(fake_l.detach()).realness)
    _check_finite(rep_s, rep_l)
    _minimize(state.optimizers["disc"], -(rep_s.tensor + rep_l.tensor))

    g_s = generator_objective(m.disc_s(fake_s).realness, state.config.saturating)
    g_l = generator_objective(m.disc_l(fake_l).realness, state.config.saturating)
    _check_finite(g_s, g_l)
    _minimize(state.optimizers["gen"], g_s.tensor + g_l.tensor)

    state.t += 1
    return {"L_S": rep_s, "L_L": rep_l, "G_S": g_s, "G_L": g_l}


def dann_step(state: TrainState, batch_s, batch_l, z_s, z_l,
              probe=None, fake_classifier_override=None) -> dict[str, LossReport]:
    """One pass of the domain-adaptation algorithm, sub-steps strictly in order:

    3. ascent on {trunk, realness head} under L1 (real label 1, fake label 0);
    4. descent on gen_s then gen_l against the updated discriminator;
    5. if enabled, descent on {trunk, classifier head} under L2 with real
       samples, labels = domain;
    6. if enabled and t >= warmup, same with freshly generated fakes, labels =
       generating domain.

    ``probe`` (if given) is called with a label after each executed sub-step.
    ``fake_classifier_override`` substitutes the image pair fed to sub-step 6
    only, which is the injection point for the counterfactual-batch oracle.
    """
    cfg = state.config
    if cfg.regime != "dann":
        raise CrossganError("dann_step needs a dann state")
    m: DannModel = state.model
    xs, xl = _to_tensor(batch_s), _to_tensor(batch_l)
    trace = []

    def mark(label):
        trace.append(label)
        if probe is not None:
            probe(label)

    fake_s = m.gen_s(z_s)
    fake_l = m.gen_l(z_l)

    # step 3
    l1 = da_l1(
        m.discriminate(xs).realness,
        m.discriminate(xl).realness,
        m.discriminate(fake_s.detach()).realness,
        m.discriminate(fake_l.detach()).realness,
    )
    _check_finite(l1)
    _minimize(state.optimizers["disc"], -l1.tensor)
    mark("step3")

    # step 4: generators independently, fakes treated as real (non-saturating
    # default), both against the step-3-updated discriminator
    g_s = generator_objective(m.discriminate(fake_s).realness, cfg.saturating)
    _check_finite(g_s)
    _minimize(state.optimizers["gen_s"], g_s.tensor)
    mark("step4s")
    g_l = generator_objective(m.discriminate(fake_l).realness, cfg.saturating)
    _check_finite(g_l)
    _minimize(state.optimizers["gen_l"], g_l.tensor)
    mark("step4l")

    reports = {"L1": l1, "G_S": g_s, "G_L": g_l}
    labels = torch.cat([
        torch.zeros(xs.shape[0], dtype=torch.long),
        torch.ones(xl.shape[0], dtype=torch.long),
    ])

    # step 5
    if cfg.train_classifier_real:
        logits, _ = m.classify(torch.cat([xs, xl]))
        l2_real = da_l2(logits, labels)
        _check_finite(l2_real)
        _minimize(state.optimizers["cls"], l2_real.tensor)
        reports["L2_real"] = l2_real
        mark("step5")

    # step 6
    if cfg.train_classifier_fake and state.t >= cfg.lazy_fake_start_iteration:
        if fake_classifier_override is not None:
            fs2, fl2 = (_to_tensor(b) for b in fake_classifier_override)
        else:
            with torch.no_grad():
                fs2 = m.gen_s(z_s)
                fl2 = m.gen_l(z_l)
        logits, _ = m.classify(torch.cat([fs2, fl2]))
        l2_fake = da_l2(logits, labels)
        _check_finite(l2_fake)
        _minimize(state.optimizers["cls"], l2_fake.tensor)
        reports["L2_fake"] = l2_fake
        mark("step6")

    l2_any = reports.get("L2_real") or reports.get("L2_fake")
    if l2_any is not None:
        reports["E"] = da_energy(l1, l2_any)

    state.t += 1
    state.last_trace = trace
    return reports


def diversity_score(samples) -> float:
    """Mean pairwise Euclidean distance between flattened images, normalized
    by sqrt(pixel count); 0 signals total mode collapse."""
    data = samples.data if isinstance(samples, ImageBatch) else np.asarray(samples)
    m = data.shape[0]
    if m < 2:
        raise CrossganError("diversity_score needs at least 2 samples")
    flat = data.reshape(m, -1).astype(np.float64)
    total = 0.0
    for i in range(m):
        diffs = flat[i + 1:] - flat[i]
        total += float(np.sqrt((diffs ** 2).sum(axis=1)).sum())
    n_pairs = m * (m - 1) // 2
    return total / n_pairs / math.sqrt(flat.shape[1])


# ---------------------------------------------------------------------------
# checkpoint orchestration

def _arch_dict(config: TrainConfig) -> dict:
    arch = {
        "resolution": config.resolution,
        "z_dim": config.z_dim,
        "base_channels": config.base_channels,
        "feature_width": feature_width(config.resolution, config.base_channels),
    }
    if config.regime == "dann":
        arch["classifier_width"] = config.classifier_width
        arch["n_domains"] = 2
    return arch


def save_state(state: TrainState, ckpt_dir: str | Path) -> str:
    cfg = state.config
    data_seed, z_seed, init_seed = cfg.effective_seeds()
    manifest = {
        "regime": cfg.regime,
        "iteration": state.t,
        "seeds": {"data": data_seed, "z": z_seed, "init": init_seed},
        "variant_flags": {
            "train_classifier_real": cfg.train_classifier_real,
            "train_classifier_fake": cfg.train_classifier_fake,
            "lazy_fake_start_iteration": cfg.lazy_fake_start_iteration,
        },
        "arch": _arch_dict(cfg),
        "config": cfg.to_dict(),
    }
    if isinstance(state.model, CoGan):
        manifest["arch"]["tie_gen"] = list(state.model.tie_gen)
        manifest["arch"]["tie_disc"] = list(state.model.tie_disc)
    return ckpt_io.save_checkpoint(
        ckpt_dir, model_groups(state.model), state.optimizers, manifest
    )


@dataclass
class LoadedCheckpoint:
    path: Path
    manifest: dict
    config: TrainConfig
    model: nn.Module

    @property
    def regime(self) -> str:
        return self.manifest["regime"]

    @property
    def iteration(self) -> int:
        return self.manifest["iteration"]

    @property
    def fingerprint(self) -> str:
        return self.manifest["fingerprint"]


def load_models(ckpt_dir: str | Path) -> LoadedCheckpoint:
    """Rebuild the regime's networks from a checkpoint, in eval mode."""
    ckpt_dir = Path(ckpt_dir)
    manifest = ckpt_io.read_manifest(ckpt_dir)
    config = TrainConfig.from_dict(manifest["config"])
    if manifest["arch"].get("tie_gen") is not None and config.regime == "cogan":
        config.tie_gen = tuple(manifest["arch"]["tie_gen"])
        config.tie_disc = tuple(manifest["arch"]["tie_disc"])
    model = build_models(config)
    for group, module in model_groups(model).items():
        ckpt_io.load_group(ckpt_dir, manifest, group, module)
    model.eval()
    return LoadedCheckpoint(ckpt_dir, manifest, config, model)


def restore_state(ckpt_dir: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a full training state (params, optimizer moments, iteration)."""
    ckpt_dir = Path(ckpt_dir)
    manifest = ckpt_io.read_manifest(ckpt_dir)
    cfg = config if config is not None else TrainConfig.from_dict(manifest["config"])
    state = build_state(cfg)
    for group, module in model_groups(state.model).items():
        ckpt_io.load_group(ckpt_dir, manifest, group, module)
    for label, opt in state.optimizers.items():
        ckpt_io.load_optimizer(ckpt_dir, manifest, label, opt)
    state.t = manifest["iteration"]
    return state


# ---------------------------------------------------------------------------
# the training loop

def _resolve_generator(model: nn.Module, regime: str, domain: str | None):
    if regime in ("single", "combined"):
        return model.gen
    if domain not in ("S", "L"):
        raise CrossganError(f"{regime} sampling requires domain S or L")
    if regime == "cogan":
        return model.generator(domain)
    return model.generator(domain)  # dann


def sample(checkpoint, z, domain: str | None = None) -> ImageBatch:
    """Generate images from a checkpoint; inference-mode batch norm."""
    lc = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_models(checkpoint)
    z = _to_tensor(z)
    if z.ndim != 2 or z.shape[1] != lc.config.z_dim:
        raise CrossganError(
            f"z must be (m, {lc.config.z_dim}), got {tuple(z.shape)}"
        )
    gen = _resolve_generator(lc.model, lc.regime, domain)
    gen.eval()
    with torch.no_grad():
        imgs = gen(z).numpy()
    label = domain or lc.config.domain or "S"
    return ImageBatch(imgs, [label] * imgs.shape[0])


def sample_paired(checkpoint, z) -> tuple[ImageBatch, ImageBatch]:
    """Evaluate both coupled generators on the identical z; index-aligned."""
    lc = checkpoint if isinstance(checkpoint, LoadedCheckpoint) else load_models(checkpoint)
    if lc.regime != "cogan":
        raise CrossganError(f"sample_paired needs a cogan checkpoint, got {lc.regime!r}")
    return sample(lc, z, "S"), sample(lc, z, "L")


def _write_config_snapshot(config: TrainConfig, run_dir: Path):
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(map(str, value))
        lines.append(f"{key}={value}\n")
    (run_dir / "config.txt").write_text("".join(lines), encoding="utf-8")


def _prune_checkpoints(ckpt_root: Path, keep_last: int, iters_per_epoch: int):
    dirs = sorted(p for p in ckpt_root.iterdir() if p.name.startswith("ckpt_"))
    if len(dirs) <= keep_last:
        return
    keep = set(dirs[-keep_last:])
    for p in dirs:
        it = int(p.name.split("_")[1])
        if it % max(iters_per_epoch, 1) == 0:
            keep.add(p)
    for p in dirs:
        if p not in keep:
            shutil.rmtree(p)


def _dump_samples(state: TrainState, z: torch.Tensor, path: Path) -> dict[str, float]:
    """Render the fixed-z grid for the current parameters (inference mode);
    two-domain regimes get a side-by-side S|L composite."""
    from .render import save_grid, side_by_side

    cfg = state.config
    model = state.model
    model.eval()
    scores = {}
    with torch.no_grad():
        if cfg.regime in ("single", "combined"):
            imgs = model.gen(z).numpy()
            save_grid(imgs, path)
            scores["all"] = diversity_score(imgs)
        else:
            gens = {"S": _resolve_generator(model, cfg.regime, "S"),
                    "L": _resolve_generator(model, cfg.regime, "L")}
            panels = {}
            for dom, gen in gens.items():
                imgs = gen(z).numpy()
                panels[dom] = imgs
                scores[dom] = diversity_score(imgs)
            side_by_side(panels["S"], panels["L"], path)
    model.train()
    return scores


def train(config: TrainConfig, corpus: Corpus,
          resume_from: str | Path | None = None) -> tuple[Path, Path]:
    """Run the configured regime; returns (final checkpoint dir, run dir)."""
    config.validate()
    if config.run_dir is None:
        raise CrossganError("config.run_dir must be set")
    apply_determinism(config.deterministic)

    needs_both = config.regime in ("combined", "cogan", "dann")
    if needs_both and corpus.domains_present != {"S", "L"}:
        raise CrossganError(f"{config.regime} regime needs both domains in the corpus")
    if config.regime == "single" and config.domain not in corpus.domains_present:
        raise CrossganError(f"domain {config.domain!r} not present in corpus")

    data_seed, z_seed, _ = config.effective_seeds()
    b, res = config.batch_size, config.resolution
    if config.regime == "single":
        streams = {"S" if config.domain == "S" else "L":
                   minibatch_stream(corpus, b, config.domain, data_seed, res)}
        iters_per_epoch = next(iter(streams.values())).batches_per_epoch
    elif config.regime == "combined":
        streams = {"mix": minibatch_stream(corpus, b, None, data_seed, res)}
        iters_per_epoch = streams["mix"].batches_per_epoch
    else:
        streams = {
            "S": minibatch_stream(corpus, b, "S", data_seed, res),
            "L": minibatch_stream(corpus, b, "L", data_seed + 1, res),
        }
        iters_per_epoch = min(s.batches_per_epoch for s in streams.values())

    if config.variant is not None:
        real, fake, warmup = variant_of(config.variant, iters_per_epoch)
        config.train_classifier_real = real
        config.train_classifier_fake = fake
        config.lazy_fake_start_iteration = warmup

    run_dir = Path(config.run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "samples").mkdir(parents=True, exist_ok=True)
    _write_config_snapshot(config, run_dir)

    if resume_from is not None:
        state = restore_state(resume_from, config)
    else:
        state = build_state(config)
    state.model.train()

    ckpt_every = config.checkpoint_every or iters_per_epoch
    sample_every = config.sample_every or iters_per_epoch
    dump_z = fixed_z(z_seed, config.sample_count, config.z_dim) if config.sample_count else None

    loss_log = open(run_dir / "losses.tsv", "a", encoding="utf-8")
    div_log = open(run_dir / "samples" / "diversity.tsv", "a", encoding="utf-8")
    last_ckpt = run_dir / "checkpoints" / f"ckpt_{state.t:07d}"
    try:
        while state.t < config.iterations:
            t = state.t
            try:
                if config.regime in ("single", "combined"):
                    stream = next(iter(streams.values()))
                    reports = gan_step(state, stream.batch(t), z_batch(z_seed, t, b, config.z_dim))
                else:
                    zs = z_batch(z_seed, t, b, config.z_dim, _Z_STREAM_S)
                    zl = z_batch(z_seed, t, b, config.z_dim, _Z_STREAM_L)
                    xs, xl = streams["S"].batch(t), streams["L"].batch(t)
                    if config.regime == "cogan":
                        reports = cogan_step(state, xs, xl, zs, zl)
                    else:
                        reports = dann_step(state, xs, xl, zs, zl)
            except NonFiniteLossError as err:
                diag = run_dir / "checkpoints" / f"diagnostic_{state.t:07d}"
                save_state(state, diag)
                loss_log.flush()
                raise NonFiniteLossError(str(err), checkpoint_dir=diag) from None

            for label, report in reports.items():
                loss_log.write(report.log_line(state.t, label) + "\n")

            if dump_z is not None and state.t % sample_every == 0:
                n_dump = state.t // sample_every
                scores = _dump_samples(state, dump_z, run_dir / "samples" / f"epoch_{n_dump}.png")
                for dom, score in scores.items():
                    div_log.write(f"{state.t}\t{dom}\t{score:.6f}\n")
            if state.t % ckpt_every == 0 or state.t == config.iterations:
                last_ckpt = run_dir / "checkpoints" / f"ckpt_{state.t:07d}"
                save_state(state, last_ckpt)
                _prune_checkpoints(run_dir / "checkpoints", config.keep_last, iters_per_epoch)
    finally:
        loss_log.close()
        div_log.close()

    if not last_ckpt.is_dir() or int(last_ckpt.name.split("_")[1]) != state.t:
        last_ckpt = run_dir / "checkpoints" / f"ckpt_{state.t:07d}"
        save_state(state, last_ckpt)
    return last_ckpt, run_dir
