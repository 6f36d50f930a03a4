"""Command-line front end: one subcommand per pipeline stage plus ``sweep``.

Exit codes: 0 on success, 1 for invalid input (config, data, fingerprint
mismatch, unsupported request) and 2 for numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from udskernel.config import RunConfig
from udskernel.dataset import Dataset, concat, read_dataset, write_dataset
from udskernel.envs import generate_dataset
from udskernel.exceptions import InputError, NumericalError
from udskernel.experiment import (
    SweepTable,
    cell_seed_sequence,
    dp_oracle,
    evaluate_policy,
    fit_asymptote,
    run_sweep,
    train_policy,
    zeta_batch,
)
from udskernel.kernels import information_gain
from udskernel.pevi import KernelPEVI, load_policy, save_policy, split_folds, theoretical_bonus_scales
from udskernel.reward import RewardRelabeler, save_reward_model

log = logging.getLogger("udskernel")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def _streams(seed: int, n1: int, n2: int):
    """The same (d1, d2, fold, eval) streams a sweep cell with seed index 0 uses."""
    return cell_seed_sequence(seed, n1, n2, 0).spawn(4)


def _read_optional(path, env) -> Optional[Dataset]:
    """A dataset file, or ``None`` when the file holds no records."""
    text = Path(path).read_text(encoding="utf-8") if Path(path).exists() else None
    if text is not None and not text.strip():
        return None
    return read_dataset(path, action_count=env.action_count)


def _fmt(x: float) -> str:
    return repr(float(x))


def _emit(lines: list[str], out: Optional[str]) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    env = cfg.make_env()
    n1, n2, seed = cfg.data.n1, cfg.data.n2, cfg.data.seed
    s1, s2, _, _ = _streams(seed, n1, n2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d1 = generate_dataset(env, n1, True, np.random.default_rng(s1), noise_sigma=cfg.data.noise_sigma)
    write_dataset(d1, out / "d1.jsonl")
    if n2 > 0:
        write_dataset(generate_dataset(env, n2, False, np.random.default_rng(s2)), out / "d2.jsonl")
    else:
        (out / "d2.jsonl").write_text("", encoding="utf-8")
    print(f"N1={n1} N2={n2} H={env.horizon} seed={seed}")


def cmd_train(args, cfg: RunConfig) -> None:
    env = cfg.make_env()
    d1 = read_dataset(args.d1, action_count=env.action_count)
    if not d1.labeled:
        raise InputError(f"{args.d1}: D1 must carry rewards")
    d2 = _read_optional(args.d2, env) if args.d2 else None
    if d2 is not None and d2.labeled:
        raise InputError(f"{args.d2}: D2 must not carry rewards")
    n2 = d2.n_episodes if d2 is not None else 0
    if d1.n_episodes + n2 < env.horizon:
        raise InputError("insufficient episodes for H folds")
    _, _, s_fold, _ = _streams(cfg.data.seed, d1.n_episodes, n2)
    fold_seed = int(s_fold.generate_state(1)[0])
    settings = cfg.pipeline_settings()

    if d2 is None:
        relabeler = RewardRelabeler(
            env, settings.kernel, settings.nu, settings.norm_bound, settings.delta, settings.beta_scale
        ).fit(d1)
        plan = split_folds(d1.n_episodes, env.horizon, settings.fold_scheme, fold_seed)
        pevi = KernelPEVI(
            env, settings.kernel, settings.lam, settings.B, settings.c_B, settings.R_Q, settings.delta,
            settings.fold_scheme, fold_seed,
        ).fit(d1, fold_plan=plan)
        relabeled = None
    else:
        relabeler, pevi = train_policy(env, settings, d1, d2, fold_seed)
        relabeled = relabeler.transform(d2)

    out = Path(args.out)
    fingerprint = cfg.fingerprint()
    save_policy(pevi, out, fingerprint)
    save_reward_model(relabeler, out.with_suffix(".reward.npz"))
    if relabeled is not None:
        write_dataset(relabeled, out.with_suffix(".relabeled.jsonl"))

    lines = [f"fingerprint={fingerprint}", f"n1={d1.n_episodes}", f"n2={n2}", f"nu={_fmt(relabeler.ridge_)}"]
    lines += [f"beta_{h}={_fmt(relabeler.beta(h))}" for h in range(1, env.horizon + 1)]
    lines += [f"lam={_fmt(pevi.lam_)}", f"B={_fmt(pevi.B_)}"]
    lines += [f"fold_gain_{h}={_fmt(g)}" for h, g in enumerate(pevi.fold_information_gains(), start=1)]
    lines.append(f"truncated={pevi.fold_plan_.truncated}")
    _emit(lines, str(out.with_suffix(".report.txt")))


def cmd_eval(args, cfg: RunConfig) -> None:
    policy, fingerprint = load_policy(args.policy)
    if fingerprint != cfg.fingerprint():
        raise InputError(f"policy fingerprint {fingerprint[:12]} does not match config {cfg.fingerprint()[:12]}")
    env = cfg.make_env()
    if args.suboptimality and env.to_dict()["variant"] != "ring-gaussian":
        raise InputError("oracle unsupported for this environment")
    n1, n2 = args.n1 or cfg.data.n1, args.n2 if args.n2 is not None else cfg.data.n2
    *_, s_eval = _streams(cfg.data.seed, n1, n2)
    M = cfg.evaluation.M
    mean, se = evaluate_policy(env, policy.act, M, np.random.default_rng(s_eval))
    if args.format == "csv":
        header, row = ["v_mean", "v_se", "m_rollouts"], [_fmt(mean), _fmt(se), str(M)]
        if args.suboptimality:
            oracle = dp_oracle(env, cfg.evaluation.grid_resolution)
            header.append("suboptimality")
            row.append(_fmt(oracle.mean_initial_value() - mean))
        _emit([",".join(header), ",".join(row)], args.out)
        return
    lines = [f"v_mean={_fmt(mean)}", f"v_se={_fmt(se)}", f"m_rollouts={M}"]
    if args.suboptimality:
        oracle = dp_oracle(env, cfg.evaluation.grid_resolution)
        lines.append(f"v_star={_fmt(oracle.mean_initial_value())}")
        lines.append(f"suboptimality={_fmt(oracle.mean_initial_value() - mean)}")
    _emit(lines, args.out)


def cmd_sweep(args, cfg: RunConfig) -> None:
    ev = cfg.evaluation
    table = run_sweep(
        cfg.pipeline_settings(), ev.n1_grid, ev.n2_grid, ev.seeds, ev.master_seed, args.workers, cfg.fingerprint()
    )
    table.write_csv(args.out)
    for err in table.errors:
        print(f"cell failed: {err}", file=sys.stderr)
    print(f"rows={len(table.rows)} failed={len(table.errors)} out={args.out}")


def cmd_fit_asymptote(args, cfg: Optional[RunConfig]) -> None:
    fit = fit_asymptote(SweepTable.read_csv(args.input))
    text = fit.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_diag_infogain(args, cfg: RunConfig) -> None:
    env = cfg.make_env()
    kernel = cfg.kernel_spec()
    a = cfg.algorithm
    d1 = read_dataset(args.d1, action_count=env.action_count)
    d2 = _read_optional(args.d2, env) if args.d2 else None
    N = d1.n_episodes + (d2.n_episodes if d2 is not None else 0)
    lam = a.lam or 1.0 + 1.0 / N
    H = env.horizon
    relabeler = RewardRelabeler(env, kernel, a.nu, a.norm_bound, a.delta, a.beta_scale).fit(d1)

    merged = d1.without_rewards() if d2 is None else concat(d1.without_rewards(), d2)
    lines = [f"fingerprint={cfg.fingerprint()}", f"N={N}", f"lam={_fmt(lam)}"]
    streams = _streams(cfg.data.seed, d1.n_episodes, N - d1.n_episodes)
    if N >= H:
        plan = split_folds(N, H, a.fold_scheme, int(streams[2].generate_state(1)[0]))
        for h in range(1, H + 1):
            s, act, _, _ = merged.select(plan.folds[h - 1]).step(h)
            lines.append(f"fold_gain_{h}={_fmt(information_gain(kernel, env.embed(s, act), lam))}")
    for h in range(1, H + 1):
        s, act, _, _ = d1.step(h)
        lines.append(f"gain_d1_{h}={_fmt(information_gain(kernel, env.embed(s, act), relabeler.ridge_))}")
        lines.append(f"beta_{h}={_fmt(relabeler.beta(h))}")

    n_fold = max(N // H, 1)
    d = kernel.decay_param if kernel.family != "explicit-features" else kernel.feature_dim
    for name, value in theoretical_bonus_scales(n_fold * H, H, a.delta, d, kernel.ambient_dim).items():
        lines.append(f"bonus_scale_theory[{kernel.resolved_decay_class}|{name}]={_fmt(value)}")

    reference = _reference_policy(args, cfg, env)
    rng = np.random.default_rng(streams[3])
    s = env.sample_initial(rng, cfg.evaluation.M)
    for h in range(1, H + 1):
        act = np.asarray(reference(h, s)).reshape(-1)
        Z = env.embed(s, act)
        for label, data in (("d1", d1), ("d2", d2)):
            if data is None:
                support = np.zeros((0, kernel.ambient_dim))
            else:
                ss, aa, _, _ = data.step(h)
                support = env.embed(ss, aa)
            lines.append(f"zeta_{label}_{h}={_fmt(zeta_batch(kernel, support, Z, lam).mean())}")
        s, _ = env.step(h, s, act, rng)
    _emit(lines, args.out)


def _reference_policy(args, cfg: RunConfig, env):
    if args.reference_policy:
        policy, _ = load_policy(args.reference_policy)
        return policy.act
    if env.to_dict()["variant"] == "ring-gaussian":
        return dp_oracle(env, cfg.evaluation.grid_resolution).act
    raise InputError("this environment has no oracle; pass --reference-policy")


# -- wiring ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udskernel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, config=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", required=True)
            p.add_argument("--seed", type=int, help="override data.seed and evaluation.master_seed")
        p.set_defaults(func=func, needs_config=config)
        return p

    p = add("gen-data", cmd_gen_data, "generate labeled D1 and unlabeled D2 files")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "relabel D2, run PEVI and write a policy archive")
    p.add_argument("--d1", required=True)
    p.add_argument("--d2")
    p.add_argument("--out", required=True, help="policy archive path (.npz)")

    p = add("eval", cmd_eval, "Monte-Carlo value of a stored policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--suboptimality", action="store_true", help="also report the gap to the DP optimum")
    p.add_argument("--n1", type=int, help="N1 used to derive the evaluation stream")
    p.add_argument("--n2", type=int, help="N2 used to derive the evaluation stream")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.add_argument("--out")

    p = add("sweep", cmd_sweep, "run the (N1, N2, seed) grid")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=["csv"], default="csv")

    p = add("fit-asymptote", cmd_fit_asymptote, "regress cell means on N1^-1/2 and N2^-1/2", config=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")

    p = add("diag-infogain", cmd_diag_infogain, "information-gain, beta and zeta diagnostics")
    p.add_argument("--d1", required=True)
    p.add_argument("--d2")
    p.add_argument("--reference-policy")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config).with_seed(args.seed) if args.needs_config else None
        if getattr(args, "workers", 1) < 1:
            raise InputError("--workers must be >= 1")
        args.func(args, cfg)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
