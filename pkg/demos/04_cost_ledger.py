#!/usr/bin/env python3
"""Exact-decimal cost accounting and worst-case budget estimates.

Every metered call lands in an append-only ledger as an exact Decimal;
totals are exact sums, so a million micro-entries show zero float drift.
The estimator multiplies out a pipeline shape (tokens/call x calls/round
x rounds x parallel runs) at a flat per-million rate.

Run: python3 demos/04_cost_ledger.py
"""
from decimal import Decimal

from proofpipe import CostLedger, Usage, cost_of, estimate_max_budget
from proofpipe.gateway import Price


def main():
    print("== per-call pricing ==")
    price = Price(Decimal("1.25"), Decimal("10"))
    usage = Usage(input_tokens=123_456, output_tokens=7_890)
    print(f"123,456 in + 7,890 out at $1.25/$10 per M -> ${cost_of(usage, price)}")
    flat = Price(Decimal("10"), Decimal("10"))
    print(f"a 32K-token call at a flat $10/M -> ${cost_of(Usage(0, 32_000), flat)}")
    print()

    print("== worst-case budgets for pipeline shapes ==")
    shallow = estimate_max_budget(32_000, 2, 30, 100, 10)
    print(f"32K tokens/call x 2 calls x 30 rounds x 100 parallel runs @ $10/M = ${shallow}/question")
    deep = estimate_max_budget(128_000, 64, 16, 64, Decimal("0.42"))
    print(f"128K tokens/call x 64 x 16 x 64 @ $0.42/M = ${deep}/question")
    print("(narrow-width looping with early exit is how a run stays in single digits)")
    print()

    print("== ledger additivity ==")
    ledger = CostLedger()
    for i in range(1, 6):
        u = Usage(1000 * i, 500 * i)
        ledger.append(f"run{i % 2 + 1}", "solver" if i % 2 else "grader", "flat", u, cost_of(u, flat))
    print("entries:")
    for e in ledger.entries:
        print(f"  #{e.seq} {e.run_id} {e.role:<7} {e.usage.total:>6} tokens  ${e.usd}")
    print("per role:", {k: str(v) for k, v in ledger.total_by_role().items()})
    print("per run: ", {k: str(v) for k, v in ledger.total_by_run().items()})
    print(f"grand total: ${ledger.grand_total()} (exactly the sum of the entries)")


if __name__ == "__main__":
    main()
