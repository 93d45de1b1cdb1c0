import argparse
import asyncio
import os
import sys

import pandas as pd

from isac_errors import InitializationError, SubproblemInfeasibleError
from orchestrator import BaselineSpec, run_baseline, run_bcd
from pipeline_log import PipelineLogger
from scenario import generate_random_scenario, load_scenario, with_overrides
from trajectory_rl import DdpgConfig

# --- CONFIGURATION ---
SCENARIO_FILE = os.environ.get("ISAC_EVAL_SCENARIO", "scenarios/desk.json")
EVAL_REPORT_FILE = os.environ.get("ISAC_EVAL_REPORT", "eval_report.csv")
DOMINANCE_TOL = 1e-6  # relative slack on the paired comparison
METHODS = ("proposed", "TWOBF", "BFWOT")


def load_template(path):
    if not os.path.exists(path):
        print(f"❌ Critical: {path} not found.")
        sys.exit(1)
    return load_scenario(path)


def evaluate_seed(template, seed, randomize, bcd_iters, episodes):
    """Proposed, TWOBF and BFWOT on one seed, all sharing the scenario and its channel draws."""
    cfg = generate_random_scenario(seed, template) if randomize else with_overrides(template, rng_seed=seed)
    ddpg = DdpgConfig(episodes=episodes, finetune_episodes=max(1, episodes // 5))
    row = {"seed": seed}
    try:
        row["proposed"] = run_bcd(cfg, bcd_iters=bcd_iters, ddpg=ddpg, seed=seed).sum_rate
        for kind in METHODS[1:]:
            row[kind] = run_baseline(BaselineSpec(kind, seed=seed), cfg, bcd_iters=bcd_iters, ddpg=ddpg).sum_rate
    except (SubproblemInfeasibleError, InitializationError) as e:
        print(f"   ⚠️ Seed {seed} infeasible: {e}")
        row["status"] = "infeasible"
        return row
    row["status"] = "ok"
    return row


async def run_evaluation(template, seeds, randomize, bcd_iters, episodes, concurrency):
    semaphore = asyncio.Semaphore(max(1, concurrency))

    async def one(seed):
        async with semaphore:
            print(f"   Processing seed {seed}...")
            return await asyncio.to_thread(evaluate_seed, template, seed, randomize, bcd_iters, episodes)

    return await asyncio.gather(*(one(s) for s in seeds))


def dominance(table: pd.DataFrame) -> pd.DataFrame:
    ok = table[table["status"] == "ok"].copy()
    for kind in METHODS[1:]:
        slack = DOMINANCE_TOL * ok[kind].abs().clip(lower=1.0)
        ok[f"beats_{kind}"] = ok["proposed"] >= ok[kind] - slack
    return ok


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--scenario", type=str, default=SCENARIO_FILE)
    parser.add_argument("--seeds", type=int, default=10, help="Number of paired seeds")
    parser.add_argument("--randomize", action="store_true", help="Draw a random layout per seed from the scenario")
    parser.add_argument("--bcd-iters", type=int, default=3)
    parser.add_argument("--episodes", type=int, default=100)
    parser.add_argument("--concurrency", type=int, default=1)
    args = parser.parse_args()

    PipelineLogger.enabled = False
    template = load_template(args.scenario)
    print(f"🚀 Paired evaluation on {args.seeds} seeds ({args.scenario})")
    rows = asyncio.run(
        run_evaluation(template, range(args.seeds), args.randomize, args.bcd_iters, args.episodes, args.concurrency)
    )
    table = pd.DataFrame(rows)
    table.to_csv(EVAL_REPORT_FILE, index=False)
    scored = dominance(table)

    print("\n" + "=" * 60)
    print("EVAL REPORT: proposed vs TWOBF vs BFWOT (sum rate, bits)")
    print("=" * 60)
    for row in scored.itertuples(index=False):
        flags = "" if row.beats_TWOBF and row.beats_BFWOT else "   <-- dominance broken"
        print(f"Seed {row.seed}: proposed {row.proposed:.4f} | TWOBF {row.TWOBF:.4f} | BFWOT {row.BFWOT:.4f}{flags}")
    print("-" * 60)
    infeasible = int((table["status"] != "ok").sum())
    print(f"Seeds evaluated: {len(table)} (infeasible: {infeasible})")
    print(f"Report written to {EVAL_REPORT_FILE}")
    print("=" * 60)

    if scored.empty or not (scored["beats_TWOBF"].all() and scored["beats_BFWOT"].all()):
        print("\n❌ FAILED: the proposed design does not dominate both baselines on every feasible seed.")
        sys.exit(1)
    print("\n✅ PASSED: proposed >= TWOBF and proposed >= BFWOT on every feasible seed.")


if __name__ == "__main__":
    main()
