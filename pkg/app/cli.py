"""
命令行入口：python -m app <子命令> [--config PATH] [--seed N] [--out DIR]

退出码：0 成功；1 配置 / 输入校验失败；2 数值异常 (NaN 中止、梯度校验不通过)
"""
import argparse
import json
import os
import sys
from typing import List, Optional

from pydantic import ValidationError
from sqlmodel import Session

from app.core.config import OUTPUT_DIR_ENV, load_section, load_settings, load_train_config
from app.core.errors import ConfigError, InvalidInputError, NumericalAbort
from app.core.logger import add_file_sinks, logger

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


def _out_dir(args) -> str:
    return args.out or os.getenv(OUTPUT_DIR_ENV) or "out"


def _print_json(payload) -> None:
    print(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True))


# =================================================================
# 子命令
# =================================================================

def cmd_train(args) -> int:
    from app.core.database import engine, init_db
    from app.services.experiment import run_training
    from app.services.reports import register_run

    cfg = load_train_config(args.config, args.seed, args.out)
    add_file_sinks(os.path.join(cfg.output_dir, "logs"))
    result = run_training(cfg, progress=not args.quiet)

    # 训练结束后登记到数据库，不影响 metrics 文件
    if not args.no_register:
        init_db()
        with Session(engine) as session:
            register_run(session, result.summary, cfg.output_dir)
    _print_json(result.summary)
    return EXIT_OK


def cmd_theorem_check(args) -> int:
    from app.services.oracle import TheoremGridConfig, theorem_grid
    from app.services.reports import write_jsonl

    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_section("theorem", TheoremGridConfig, args.config, overrides)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)

    reports = list(theorem_grid(cfg))
    write_jsonl(reports, os.path.join(out_dir, "theorem.jsonl"))

    satisfied = [r for r in reports if r.assumptions_satisfied]
    mc_hits = sum(1 for r in satisfied if r.dc_pick_monte_carlo == r.dc_pick_exact)
    summary = {
        "n_scenarios": len(reports),
        "n_assumptions_satisfied": len(satisfied),
        "theorem_holds_on_satisfied": sum(1 for r in satisfied if r.theorem_holds),
        "monte_carlo_agreement_on_satisfied": mc_hits / len(satisfied) if satisfied else None,
        "G": cfg.G,
    }
    logger.info(f"📐 [Theorem] {summary}")
    _print_json(summary)
    return EXIT_OK


def cmd_compare_consensus(args) -> int:
    from app.services.experiment import compare_consensus

    cfg = load_train_config(args.config, args.seed, args.out)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    rows = compare_consensus(cfg, seeds, progress=not args.quiet)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "compare_consensus.json"), "w", encoding="utf-8") as f:
        json.dump(rows, f, ensure_ascii=False, indent=2)

    print(f"{'strategy':<16}{'label_acc':>12}{'reward_corr':>14}")
    for row in rows:
        print(f"{row['strategy']:<16}{row['mean_final_label_accuracy']:>12.4f}{row['mean_reward_correctness']:>14.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from app.services.oracle import grad_check

    report = grad_check(n_instances=args.n, seed=args.seed if args.seed is not None else 0)
    _print_json(report.model_dump())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_eval(args) -> int:
    from app.services.experiment import evaluate
    from app.services.reports import export_csv
    from app.services.taskgen import load_suite

    run_dir = _out_dir(args)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpt_dir):
        raise InvalidInputError(f"{run_dir} 下没有 checkpoints 目录")
    suite = load_suite(os.path.join(run_dir, "suite"), checkpoint_dir=ckpt_dir)
    policies = {spec.question_id: params for spec, params in suite}
    report = evaluate(policies, suite, seed=args.seed if args.seed is not None else 0)
    with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))
    if args.csv:
        export_csv(run_dir, args.csv if args.csv != "-" else None)
    _print_json({k: v for k, v in report.model_dump().items() if k != "tasks"})
    return EXIT_OK


def cmd_sweep_unlearn_lr(args) -> int:
    from app.services.experiment import SweepConfig, run_unlearn_sweep

    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_section("sweep", SweepConfig, args.config, overrides)
    rows = run_unlearn_sweep(cfg)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep_unlearn_lr.jsonl"), "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    for row in rows:
        print(f"eta_u={row['eta_u']:<8g} H(anchor)={row['anchor_entropy']:.4f} "
              f"H(explorer)={row['explorer_entropy']:.4f} invalid={row['invalid_mass']:.2e}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    server = load_settings().get("server", {})
    uvicorn.run(
        "app.main:app",
        host=args.host or server.get("host", "0.0.0.0"),
        port=args.port or int(server.get("port", 8088)),
    )
    return EXIT_OK


# =================================================================
# 参数解析
# =================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 配置文件 (覆盖 config/settings.json)")
    common.add_argument("--seed", type=int, help="覆盖配置里的随机种子")
    common.add_argument("--out", help="输出目录 (覆盖配置与 DCRL_OUTPUT_DIR)")
    common.add_argument("--quiet", action="store_true", help="不显示进度条")

    parser = argparse.ArgumentParser(prog="python -m app", description="DualConsensus lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="按配置训练并写出 metrics.jsonl")
    p.add_argument("--no-register", action="store_true", help="不写 run 登记表")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("theorem-check", parents=[common], help="在场景网格上检查选举定理")
    p.set_defaults(func=cmd_theorem_check)

    p = sub.add_parser("compare-consensus", parents=[common], help="三种选举策略的成对种子对比")
    p.add_argument("--seeds", type=int, default=5, help="成对种子个数")
    p.set_defaults(func=cmd_compare_consensus)

    p = sub.add_parser("grad-check", parents=[common], help="有限差分校验全部梯度")
    p.add_argument("--n", type=int, default=100, help="随机实例个数")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", parents=[common], help="评估 --out 目录下的 checkpoints")
    p.add_argument("--csv", nargs="?", const="-", help="同时把 metrics.jsonl 导出为 CSV (可给路径)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-unlearn-lr", parents=[common], help="遗忘学习率敏感性扫描")
    p.set_defaults(func=cmd_sweep_unlearn_lr)

    p = sub.add_parser("serve", parents=[common], help="启动结果浏览 API")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, ValidationError) as e:
        logger.error(f"❌ 配置 / 输入错误:\n{e}")
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    except NumericalAbort as e:
        logger.error(f"❌ 数值异常 (step={e.step}, question={e.question_id}), 现场: {e.dump_path}")
        return EXIT_NUMERICAL
