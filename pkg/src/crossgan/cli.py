"""Command-line surface.

Subcommands: ingest, synth, train, generate, grid, paired, index, knn-panel,
retrieve, losses. Reports go to stdout as tab-separated lines, logs to
stderr. Exit codes: 0 success, 1 user/config error, 2 numerical abort.

Every command accepts --config FILE (flat key=value lines) supplying
defaults; explicit flags override file values. Each run writes its resolved
configuration next to its primary output before any compute, and setting
CROSSGAN_DETERMINISTIC=1 forces the bitwise-reproducible mode.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import embedspace, render
from .corpus import (
    DOMAINS,
    load_batch,
    load_manifest,
    scan_corpus,
    synth_corpus,
    write_manifest,
)
from .corpus import _load_image  # query-image decoding for panels
from .errors import CrossganError, NonFiniteLossError
from .losses import da_energy, da_l1, da_l2, gan_loss
from .train import (
    TrainConfig,
    apply_determinism,
    load_models,
    sample,
    sample_paired,
    train,
    z_batch,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise CrossganError(message)


def _parse_domain_map(pairs: list[str] | None) -> dict[str, str] | None:
    if not pairs:
        return None
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CrossganError(f"--map expects SUBDIR=DOMAIN, got {pair!r}")
        sub, dom = pair.split("=", 1)
        out[sub] = dom
    return out


def _load_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise CrossganError(f"config file {p} does not exist")
    values = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CrossganError(f"{p}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    by_dest = {a.dest: a for a in parser._actions}
    out = {}
    for key, raw in values.items():
        if key in ("command",):
            continue
        action = by_dest.get(key)
        if action is None:
            raise CrossganError(f"config file key {key!r} is not a flag of this command")
        if raw == "None":
            out[key] = None
        elif isinstance(action, argparse.BooleanOptionalAction) or isinstance(action.const, bool):
            out[key] = raw in ("True", "true", "1")
        elif action.type is not None:
            out[key] = action.type(raw)
        elif isinstance(action, argparse._AppendAction):
            out[key] = raw.split(",") if raw else None
        else:
            out[key] = raw
    return out


def _write_effective_config(args: argparse.Namespace, out_path: Path, command: str):
    out_path.parent.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    lines = [f"command={command}\n"]
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(map(str, value))
        lines.append(f"{key}={value}\n")
    out_path.write_text("".join(lines), encoding="utf-8")


def _seeded_z(seed: int, m: int, z_dim: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(-1.0, 1.0, (m, z_dim)).astype(np.float32))


def _print(line: str):
    sys.stdout.write(line + "\n")


def _log(line: str):
    sys.stderr.write(line + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args):
    corpus = scan_corpus(args.root, _parse_domain_map(args.map), args.manifest)
    _write_effective_config(args, Path(args.manifest).with_suffix(".config.txt"), "ingest")
    episodes = corpus.episodes
    for dom in DOMAINS:
        frames = [r for r in corpus.records if r.domain == dom]
        eps = {r.episode_id for r in frames}
        if frames:
            _print(f"domain\t{dom}\tframes\t{len(frames)}\tepisodes\t{len(eps)}")
    _print(f"total\t{len(corpus)}\tepisodes\t{len(episodes)}\tskipped\t{corpus.skipped}")


def cmd_synth(args):
    corpus = synth_corpus(args.episodes, args.frames, args.resolution, args.seed, args.root)
    manifest = args.manifest or str(Path(args.root) / "manifest.tsv")
    write_manifest(corpus, manifest)
    _write_effective_config(args, Path(manifest).with_suffix(".config.txt"), "synth")
    _print(f"total\t{len(corpus)}\tepisodes\t{len(corpus.episodes)}\tmanifest\t{manifest}")


def cmd_train(args):
    corpus = load_manifest(args.manifest)
    fields = (
        "regime domain resolution z_dim base_channels classifier_width batch_size "
        "learning_rate iterations optimizer beta1 beta2 saturating variant "
        "train_classifier_real train_classifier_fake lazy_fake_start_iteration "
        "seed data_seed z_seed init_seed checkpoint_every sample_every "
        "sample_count keep_last deterministic run_dir"
    ).split()
    config = TrainConfig(**{f: getattr(args, f) for f in fields})
    final_ckpt, run_dir = train(config, corpus, resume_from=args.resume)
    _print(f"checkpoint\t{final_ckpt}")
    _print(f"run_dir\t{run_dir}")


def cmd_generate(args):
    apply_determinism(args.deterministic)
    lc = load_models(args.checkpoint)
    out_dir = Path(args.out_dir)
    _write_effective_config(args, out_dir / "generate.config.txt", "generate")
    z = _seeded_z(args.seed, args.n, lc.config.z_dim)
    batch = sample(lc, z, args.domain)
    from .corpus import denormalize
    from PIL import Image
    for i in range(len(batch)):
        img = Image.fromarray(denormalize(batch.data[i]).transpose(1, 2, 0))
        img.save(out_dir / f"sample_{i:05d}.png")
    _print(f"wrote\t{len(batch)}\t{out_dir}")


def cmd_grid(args):
    apply_determinism(args.deterministic)
    side = math.isqrt(args.m)
    if side * side != args.m or args.m > 256:
        raise CrossganError(f"grid size must be a perfect square <= 256, got {args.m}")
    lc = load_models(args.checkpoint)
    out = Path(args.out)
    _write_effective_config(args, out.with_suffix(".config.txt"), "grid")
    z = _seeded_z(args.seed, args.m, lc.config.z_dim)
    batch = sample(lc, z, args.domain)
    render.save_grid(batch.data, out)
    _print(f"grid\t{out}\ttiles\t{args.m}")


def cmd_paired(args):
    apply_determinism(args.deterministic)
    lc = load_models(args.checkpoint)
    out = Path(args.out)
    _write_effective_config(args, out.with_suffix(".config.txt"), "paired")
    z = _seeded_z(args.seed, args.m, lc.config.z_dim)
    batch_s, batch_l = sample_paired(lc, z)
    render.pair_strip(batch_s.data, batch_l.data, out, max_cols=args.m)
    _print(f"paired\t{out}\tpairs\t{args.m}")


def cmd_index(args):
    lc = load_models(args.checkpoint)
    corpus = load_manifest(args.manifest)
    index = embedspace.build_index(
        lc, corpus, args.source, resolution=args.resolution, batch=args.batch_size
    )
    embedspace.save_index(index, args.out)
    _write_effective_config(args, Path(args.out).with_suffix(".config.txt"), "index")
    _print(f"index\t{args.out}\trows\t{len(index)}\tdim\t{index.dim}\tsource\t{index.source}")


def _check_fingerprint(index, lc):
    if index.fingerprint != lc.fingerprint:
        raise CrossganError(
            "index/checkpoint fingerprint mismatch:\n"
            f"  index:      {index.fingerprint}\n"
            f"  checkpoint: {lc.fingerprint}"
        )


def cmd_knn_panel(args):
    apply_determinism(args.deterministic)
    if bool(args.z_seed is None) == bool(args.image is None):
        raise CrossganError("provide exactly one of --z-seed or --image")
    lc = load_models(args.checkpoint)
    corpus = load_manifest(args.manifest)
    indices = [embedspace.load_index(p) for p in args.index]
    for index in indices:
        _check_fingerprint(index, lc)
    res = lc.config.resolution
    out = Path(args.out)
    _write_effective_config(args, out.with_suffix(".config.txt"), "knn-panel")

    if args.image is not None:
        query_img = _load_image(args.image, res)
    else:
        z = _seeded_z(args.z_seed, 1, lc.config.z_dim)
        query_img = sample(lc, z, args.domain).data[0]

    rows = []
    for index in indices:
        present = [d for d in DOMAINS if d in set(index.domains)]
        vec = embedspace.embed(lc, query_img[None], index.source, args.domain)[0]
        for dom in present:
            hits = embedspace.knn(index, vec, args.k, domain_filter=dom)
            ids = [fid for fid, _ in hits]
            rows.append(load_batch(corpus, ids, res).data)
            for rank, (fid, dist) in enumerate(hits, 1):
                _print(f"{index.source}\t{dom}\t{rank}\t{fid}\t{dist:.6f}")
    render.knn_panel(query_img, rows, out)
    _print(f"panel\t{out}\ttiles\t{1 + sum(r.shape[0] for r in rows)}")


def cmd_retrieve(args):
    apply_determinism(args.deterministic)
    lc = load_models(args.checkpoint)
    corpus = load_manifest(args.manifest)
    index = embedspace.load_index(args.index)
    _check_fingerprint(index, lc)
    bags = embedspace.episode_bags(index, corpus)
    if args.episode not in bags:
        raise CrossganError(
            f"unknown episode {args.episode!r}; available: {', '.join(sorted(bags))}"
        )
    query = bags[args.episode]
    candidates = [b for b in bags.values() if b.domain == args.domain]
    if not candidates:
        raise CrossganError(f"no candidate episodes in domain {args.domain!r}")
    ranked, pairs = embedspace.retrieve_episodes(query, candidates, args.top, args.aggregate)
    out = Path(args.out)
    _write_effective_config(args, out.with_suffix(".config.txt"), "retrieve")
    for rank, (ep_id, dist) in enumerate(ranked, 1):
        _print(f"{rank}\t{ep_id}\t{dist:.6f}")
    res = lc.config.resolution
    top_ids = [p[0] for p in pairs[:20]]
    match_ids = [p[1] for p in pairs[:20]]
    render.pair_strip(
        load_batch(corpus, top_ids, res).data,
        load_batch(corpus, match_ids, res).data,
        out,
    )
    _print(f"strip\t{out}\tpairs\t{min(len(pairs), 20)}")


def cmd_losses(args):
    apply_determinism(args.deterministic)
    lc = load_models(args.checkpoint)
    corpus = load_manifest(args.manifest)
    cfg = lc.config
    b, res, z_dim = args.batch_size, cfg.resolution, cfg.z_dim
    model = lc.model
    model.eval()
    _, z_seed, _ = cfg.effective_seeds()

    from .corpus import minibatch_stream
    with torch.no_grad():
        for i in range(args.batches):
            if lc.regime in ("single", "combined"):
                dom = cfg.domain if lc.regime == "single" else None
                stream = minibatch_stream(corpus, b, dom, args.seed, res)
                real = torch.from_numpy(stream.batch(i).data)
                fake = model.gen(z_batch(z_seed, i, b, z_dim))
                report = gan_loss(model.disc(real).realness, model.disc(fake).realness)
                _print(report.log_line(i, "L"))
            else:
                xs = torch.from_numpy(minibatch_stream(corpus, b, "S", args.seed, res).batch(i).data)
                xl = torch.from_numpy(minibatch_stream(corpus, b, "L", args.seed + 1, res).batch(i).data)
                zs = z_batch(z_seed, i, b, z_dim, 0)
                zl = z_batch(z_seed, i, b, z_dim, 1)
                if lc.regime == "cogan":
                    rep_s = gan_loss(model.disc_s(xs).realness,
                                     model.disc_s(model.gen_s(zs)).realness)
                    rep_l = gan_loss(model.disc_l(xl).realness,
                                     model.disc_l(model.gen_l(zl)).realness)
                    _print(rep_s.log_line(i, "L_S"))
                    _print(rep_l.log_line(i, "L_L"))
                else:
                    fs, fl = model.gen_s(zs), model.gen_l(zl)
                    l1 = da_l1(model.discriminate(xs).realness,
                               model.discriminate(xl).realness,
                               model.discriminate(fs).realness,
                               model.discriminate(fl).realness)
                    labels = torch.cat([torch.zeros(b, dtype=torch.long),
                                        torch.ones(b, dtype=torch.long)])
                    logits, _ = model.classify(torch.cat([xs, xl]))
                    l2 = da_l2(logits, labels)
                    _print(l1.log_line(i, "L1"))
                    _print(l2.log_line(i, "L2"))
                    _print(da_energy(l1, l2).log_line(i, "E"))


# ---------------------------------------------------------------------------
# parser wiring

def _add_common(p):
    p.add_argument("--config", default=None, help="key=value file supplying defaults")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="crossgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[], help="scan an image corpus into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--map", action="append", metavar="SUBDIR=DOMAIN",
                   help="domain assignment; default S=S, L=L")
    p.add_argument("--manifest", required=True, help="output manifest path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate the two-style synthetic corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a training regime")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", default=None, help="checkpoint dir to resume from")
    p.add_argument("--regime", default="single", choices=("single", "combined", "cogan", "dann"))
    p.add_argument("--domain", default=None, choices=DOMAINS)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--z-dim", type=int, default=1024)
    p.add_argument("--base-channels", type=int, default=128)
    p.add_argument("--classifier-width", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--learning-rate", type=float, default=2e-4)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--optimizer", default="adam", choices=("sgd", "adam"))
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--saturating", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--variant", default=None,
                   choices=("FullDomainAdaptation", "NoClassifierTraining",
                            "NoFakeClassifierTraining", "NoRealClassifierTraining",
                            "LazyFakeClassifierTraining"))
    p.add_argument("--train-classifier-real", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--train-classifier-fake", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--lazy-fake-start-iteration", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--z-seed", type=int, default=None)
    p.add_argument("--init-seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--sample-every", type=int, default=0)
    p.add_argument("--sample-count", type=int, default=16)
    p.add_argument("--keep-last", type=int, default=3)
    p.add_argument("--run-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write individual sample PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", default=None, choices=DOMAINS)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("grid", help="render a square sample grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", default=None, choices=DOMAINS)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("paired", help="same-z sample pairs from a coupled model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_paired)

    p = sub.add_parser("index", help="build an embedding index over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", default="discriminator", choices=embedspace.SOURCES)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("knn-panel", help="nearest-neighbor panel for a query frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", action="append", required=True,
                   help="index file; repeat for multiple similarity rows")
    p.add_argument("--z-seed", type=int, default=None)
    p.add_argument("--image", default=None, help="query image path instead of --z-seed")
    p.add_argument("--domain", default=None, choices=DOMAINS)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_knn_panel)

    p = sub.add_parser("retrieve", help="cross-domain episode retrieval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--domain", required=True, choices=DOMAINS,
                   help="candidate episode domain")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--aggregate", default="min", choices=("min", "mean"))
    p.add_argument("--out", required=True, help="matched-frame strip PNG")
    _add_common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("losses", help="evaluate the regime objectives on corpus batches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_losses)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            file_values = _load_config_file(args.config)
            command = file_values.pop("command", args.command)
            if command != args.command:
                raise CrossganError(
                    f"config file is for command {command!r}, not {args.command!r}"
                )
            sub = next(a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction))
            subparser = sub.choices[args.command]
            defaults = _coerce(subparser, file_values)
            subparser.set_defaults(**defaults)
            args = parser.parse_args(argv)
        args.func(args)
        return 0
    except NonFiniteLossError as err:
        _log(f"numerical abort: {err}")
        if err.checkpoint_dir:
            _log(f"diagnostic checkpoint: {err.checkpoint_dir}")
        return 2
    except CrossganError as err:
        _log(f"error: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
