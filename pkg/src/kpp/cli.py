"""Command-line surface: train, generate, denoise, ablate, eval.

Every run writes a manifest before computing, keeps all outputs inside
its run directory, and is byte-reproducible given (args, seed).
Exit codes: 0 success, 1 usage or I/O error, 2 divergence abort.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as data_mod
from . import objective
from . import trainer as trainer_mod
from .nets import MemoryVAE, ModelConfig
from .trainer import DivergenceError, TrainConfig

SYNTH_TRAIN_N = 256
SYNTH_TEST_N = 64
SYNTH_SIDE = 16
SYNTH_TRAIN_SEED = 4242
SYNTH_TEST_SEED = 4243


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _read_config_file(path):
    """Parse `key = value` lines; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def _coerce(raw, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


class _Options:
    """Flags override config-file entries, which override defaults."""

    def __init__(self, args, defaults):
        self._args = args
        self._file = _read_config_file(args.config) if getattr(args, "config", None) else {}
        self._defaults = defaults

    def get(self, key):
        v = getattr(self._args, key, None)
        if v is not None:
            return v
        default = self._defaults[key]
        if key in self._file:
            return _coerce(self._file[key], default)
        return default

    def snapshot(self):
        return {k: self.get(k) for k in sorted(self._defaults)}


def _load_corpus(spec, binarize_mode="threshold"):
    """Resolve --data into (train Dataset, test Dataset)."""
    if spec == "synth":
        return (data_mod.synth_shapes(SYNTH_TRAIN_N, SYNTH_SIDE, SYNTH_SIDE,
                                      seed=SYNTH_TRAIN_SEED),
                data_mod.synth_shapes(SYNTH_TEST_N, SYNTH_SIDE, SYNTH_SIDE,
                                      seed=SYNTH_TEST_SEED, split="test"))
    if os.path.isdir(spec):
        train_path = os.path.join(spec, "train-images-idx3-ubyte")
        test_path = os.path.join(spec, "t10k-images-idx3-ubyte")
        for p in (train_path, test_path):
            if not os.path.exists(p):
                raise FileNotFoundError(f"expected IDX file {p}")
        train = data_mod.load_idx(train_path, split="train", name="mnist")
        test = data_mod.load_idx(test_path, split="test", name="mnist")
    elif os.path.exists(spec):
        full = data_mod.load_idx(spec, split="train")
        n = len(full)
        cut = max(1, (n * 9) // 10)
        train = data_mod.Dataset(full.images[:cut], split="train", name=full.name)
        test = data_mod.Dataset(full.images[cut:], split="test", name=full.name)
    else:
        raise FileNotFoundError(f"--data {spec!r}: no such file or directory")
    if binarize_mode != "none":
        train = data_mod.binarize(train, binarize_mode, seed=11)
        test = data_mod.binarize(test, binarize_mode, seed=12)
    return train, test


def _write_manifest(out_dir, argv, snapshot, seed):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(f"command = kpp {' '.join(argv)}\n")
        f.write(f"version = {__version__}\n")
        f.write(f"seed = {seed}\n")
        f.write(f"out = {out_dir}\n")
        for key, val in snapshot.items():
            f.write(f"{key} = {val}\n")


def _save_image_grid(out_dir, stem, images):
    paths = []
    for i, img in enumerate(images):
        p = os.path.join(out_dir, f"{stem}_{i:03d}.pgm")
        data_mod.save_pgm(p, img)
        paths.append(p)
    data_mod.save_pgm(os.path.join(out_dir, f"{stem}_grid.pgm"),
                      data_mod.image_grid(np.asarray(images)))
    return paths


TRAIN_DEFAULTS = dict(
    data="synth", T=8, K=2, L=64, epochs=30, seed=1, lr=1e-3,
    batch=4, episodes_per_epoch=32, warmup=10, schedule="cosine",
    weight_decay=1e-3, likelihood="bernoulli", sigma=1.0,
    binarize="threshold", no_memory=False, out="",
)


def _train_config(opt, train_set):
    model_cfg = ModelConfig(
        image_shape=train_set.image_shape,
        T=opt.get("T"), K=opt.get("K"), L=opt.get("L"),
        likelihood=opt.get("likelihood"), gaussian_std=opt.get("sigma"),
        ablation=opt.get("no_memory"),
    )
    return TrainConfig(
        model=model_cfg, epochs=opt.get("epochs"),
        batch_episodes=opt.get("batch"),
        episodes_per_epoch=opt.get("episodes_per_epoch"),
        lr=opt.get("lr"), schedule=opt.get("schedule"),
        warmup_epochs=opt.get("warmup"), weight_decay=opt.get("weight_decay"),
        seed=opt.get("seed"),
    )


def cmd_train(args, argv):
    opt = _Options(args, TRAIN_DEFAULTS)
    out_dir = opt.get("out") or os.path.join("runs", "train")
    snapshot = opt.snapshot()
    snapshot["out"] = out_dir
    _write_manifest(out_dir, argv, snapshot, opt.get("seed"))
    train_set, test_set = _load_corpus(opt.get("data"), opt.get("binarize"))
    config = _train_config(opt, train_set)
    _, history = trainer_mod.train(
        config, train_set, test_set, out_dir=out_dir,
        log=lambda msg: print(msg, flush=True),
    )
    print(f"wrote {os.path.join(out_dir, 'metrics.csv')} "
          f"({len(history)} rows), best.bin, final.bin")
    return 0


GEN_DEFAULTS = dict(
    ckpt="", data="synth", T=8, n=16, perturb=0.0, seed=1,
    binarize="threshold", out="",
)


def _memory_from_test_episode(model, test_set, t, seed):
    episode = data_mod.episode_grid(test_set, t, seed)
    emb = model.encode(ad.constant(episode.images))
    return model.write_memory(emb), episode


def cmd_generate(args, argv):
    opt = _Options(args, GEN_DEFAULTS)
    ckpt = opt.get("ckpt")
    if not ckpt or not os.path.exists(ckpt):
        raise FileNotFoundError(f"--ckpt {ckpt!r}: checkpoint not found")
    out_dir = opt.get("out") or os.path.join("runs", "generate")
    _write_manifest(out_dir, argv, opt.snapshot(), opt.get("seed"))
    model = MemoryVAE.load(ckpt)
    _, test_set = _load_corpus(opt.get("data"), opt.get("binarize"))
    memory, _ = _memory_from_test_episode(
        model, test_set, opt.get("T"), [opt.get("seed"), 10])
    n = opt.get("n")
    seed = opt.get("seed")
    perturb = opt.get("perturb")
    key_rows = []
    if perturb > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
        base = rng.standard_normal((model.config.K, 3))
        base_img = objective._generate_from_raw_keys(memory, base[None], model)[0]
        data_mod.save_pgm(os.path.join(out_dir, "base.pgm"), base_img)
        images = objective.perturbed_generate(memory, base, perturb, n, model,
                                              [seed, 12])
        for k in range(model.config.K):
            key_rows.append(["base", k] + [f"{v:.10g}" for v in base[k]])
    else:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
        raw = rng.standard_normal((n, model.config.K, 3))
        images = objective._generate_from_raw_keys(memory, raw, model)
        for i in range(n):
            for k in range(model.config.K):
                key_rows.append([i, k] + [f"{v:.10g}" for v in raw[i, k]])
    _save_image_grid(out_dir, "gen", images)
    with open(os.path.join(out_dir, "keys.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "k", "s", "x", "y"])
        writer.writerows(key_rows)
    print(f"wrote {n} generations + grid + keys.csv under {out_dir}")
    return 0


DENOISE_DEFAULTS = dict(
    ckpt="", data="synth", T=8, noise="salt_pepper", steps=10, n=8, seed=1,
    rate=0.1, std=0.3, scale=30.0, binarize="threshold", out="",
)


def cmd_denoise(args, argv):
    opt = _Options(args, DENOISE_DEFAULTS)
    ckpt = opt.get("ckpt")
    if not ckpt or not os.path.exists(ckpt):
        raise FileNotFoundError(f"--ckpt {ckpt!r}: checkpoint not found")
    kind = opt.get("noise")
    if kind not in data_mod.NOISE_KINDS:
        raise ValueError(f"--noise must be one of {data_mod.NOISE_KINDS}, got {kind!r}")
    out_dir = opt.get("out") or os.path.join("runs", "denoise")
    _write_manifest(out_dir, argv, opt.snapshot(), opt.get("seed"))
    model = MemoryVAE.load(ckpt)
    _, test_set = _load_corpus(opt.get("data"), opt.get("binarize"))
    t = opt.get("T")
    n = opt.get("n")
    steps = opt.get("steps")
    seed = opt.get("seed")
    sampler = data_mod.EpisodeSampler(test_set, t, np.random.SeedSequence([seed, 20]))
    rows = []
    done = 0
    while done < n:
        episode = sampler.sample()
        emb = model.encode(ad.constant(episode.images))
        memory = model.write_memory(emb)
        for i in range(min(t, n - done)):
            clean = episode.images[i]
            noisy, traj, errors = objective.denoise(
                memory, clean, kind, steps, model, [seed, 21, done],
                rate=opt.get("rate"), std=opt.get("std"), scale=opt.get("scale"),
            )
            data_mod.save_pgm(os.path.join(out_dir, f"img{done:03d}_clean.pgm"), clean)
            data_mod.save_pgm(os.path.join(out_dir, f"img{done:03d}_noisy.pgm"), noisy)
            for s, img in enumerate(traj, start=1):
                data_mod.save_pgm(
                    os.path.join(out_dir, f"img{done:03d}_step{s:02d}.pgm"), img)
            for s, err in enumerate(errors):
                rows.append([done, s, f"{err:.10g}"])
            done += 1
    with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "step", "l2_error"])
        writer.writerows(rows)
    print(f"denoised {n} images ({kind}), errors.csv under {out_dir}")
    return 0


ABLATE_DEFAULTS = dict(
    data="synth", axis="memory", values="on,off", seeds="1,2,3", epochs=30,
    T=8, K=2, L=64, lr=1e-3, batch=4, episodes_per_epoch=32, warmup=10,
    schedule="cosine", weight_decay=1e-3, likelihood="bernoulli", sigma=1.0,
    binarize="threshold", no_memory=False, seed=1, out="",
)


def _ablate_cell(opt, train_set, test_set, axis, value, seed):
    o = dict(T=opt.get("T"), K=opt.get("K"), no_memory=False)
    if axis == "T":
        o["T"] = int(value)
    elif axis == "K":
        o["K"] = int(value)
    elif axis == "memory":
        if value not in ("on", "off"):
            raise ValueError(f"--axis memory takes values on/off, got {value!r}")
        o["no_memory"] = value == "off"
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    model_cfg = ModelConfig(
        image_shape=train_set.image_shape, T=o["T"], K=o["K"], L=opt.get("L"),
        likelihood=opt.get("likelihood"), gaussian_std=opt.get("sigma"),
        ablation=o["no_memory"],
    )
    config = TrainConfig(
        model=model_cfg, epochs=opt.get("epochs"), batch_episodes=opt.get("batch"),
        episodes_per_epoch=opt.get("episodes_per_epoch"), lr=opt.get("lr"),
        schedule=opt.get("schedule"), warmup_epochs=opt.get("warmup"),
        weight_decay=opt.get("weight_decay"), seed=seed,
    )
    _, history = trainer_mod.train(config, train_set, test_set)
    final_test = [r for r in history if r.split == "test"][-1]
    return [axis, value, seed, f"{final_test.elbo:.10g}",
            f"{final_test.kl_z + final_test.kl_y:.10g}"]


def cmd_ablate(args, argv):
    opt = _Options(args, ABLATE_DEFAULTS)
    values = [v for v in str(opt.get("values")).split(",") if v]
    seeds = [int(s) for s in str(opt.get("seeds")).split(",") if s]
    if not values:
        raise ValueError("--values list is empty")
    if not seeds:
        raise ValueError("--seeds list is empty")
    out_dir = opt.get("out") or os.path.join("runs", "ablate")
    _write_manifest(out_dir, argv, opt.snapshot(), opt.get("seed"))
    train_set, test_set = _load_corpus(opt.get("data"), opt.get("binarize"))
    axis = opt.get("axis")
    rows = []
    for value in values:
        for seed in seeds:
            row = _ablate_cell(opt, train_set, test_set, axis, value, seed)
            rows.append(row)
            print(f"ablate {axis}={value} seed={seed}: "
                  f"test_elbo={row[3]} test_kl={row[4]}", flush=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "value", "seed", "test_elbo", "test_kl"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {os.path.join(out_dir, 'ablation.csv')}")
    return 0


EVAL_DEFAULTS = dict(
    ckpt="", data="synth", T=8, seed=1, binarize="threshold", out="",
)


def cmd_eval(args, argv):
    opt = _Options(args, EVAL_DEFAULTS)
    ckpt = opt.get("ckpt")
    if not ckpt or not os.path.exists(ckpt):
        raise FileNotFoundError(f"--ckpt {ckpt!r}: checkpoint not found")
    model = MemoryVAE.load(ckpt)
    _, test_set = _load_corpus(opt.get("data"), opt.get("binarize"))
    row = trainer_mod.eval_conditional(model, test_set, opt.get("T"),
                                       [opt.get("seed"), 30])
    row.seed = opt.get("seed")
    print(",".join(trainer_mod.METRICS_HEADER))
    print(",".join(str(v) for v in row.as_list()))
    pixels = int(np.prod(model.config.image_shape))
    if model.config.likelihood == "bernoulli":
        print(f"negative elbo: {-row.elbo:.4f} nats/image")
    else:
        print(f"negative elbo: {-row.elbo / (np.log(2) * pixels):.6f} bits/dim")
    return 0


def _add_common(p, defaults):
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if key == "T":
            flag = "--T"
        if key == "K":
            flag = "--K"
        if key == "L":
            flag = "--L"
        if isinstance(val, bool):
            p.add_argument(flag, action="store_const", const=True, default=None)
        else:
            p.add_argument(flag, type=type(val), default=None)
    p.add_argument("--config", type=str, default=None,
                   help="file of key = value lines (flags take precedence)")


def build_parser():
    parser = _Parser(prog="kpp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults, fn in (
        ("train", TRAIN_DEFAULTS, cmd_train),
        ("generate", GEN_DEFAULTS, cmd_generate),
        ("denoise", DENOISE_DEFAULTS, cmd_denoise),
        ("ablate", ABLATE_DEFAULTS, cmd_ablate),
        ("eval", EVAL_DEFAULTS, cmd_eval),
    ):
        p = sub.add_parser(name)
        _add_common(p, defaults)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("KPP_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except (DivergenceError, ad.NonFiniteError) as exc:
        print(f"kpp: divergence: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"kpp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
