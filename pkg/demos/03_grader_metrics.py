#!/usr/bin/env python3
"""Score a grader against human grades.

Predictions are rounded half-up and bucketed to the labels 0/1/6/7
(1 covers {1,2,3}, 6 covers {4,5,6}); the report carries 4-way accuracy,
MAE against the raw human grade (normalized by 7), the false-positive
rate P(pred >= 6 | human <= 5), the false-negative rate
P(pred <= 5 | human >= 6), a confusion matrix, and the merged-bucket
accuracy variant. Rates whose conditioning set is empty print as n/a.

Run: python3 demos/03_grader_metrics.py
"""
from proofpipe import GradingRecord, compute_metrics
from proofpipe.metrics import render_report

OPTIMISTIC_GRADER = [
    # (human, predicted) — a grader that waves flawed proofs through
    (7, 7), (7, 7), (6, 7), (6, 6), (5, 7), (4, 6), (3, 6), (2, 6), (1, 2), (0, 1),
]

STRICT_GRADER = [
    # the same solutions, graded by a picky reviewer
    (7, 6), (7, 7), (6, 6), (6, 4), (5, 3), (4, 3), (3, 1), (2, 1), (1, 0), (0, 0),
]


def main():
    for name, rows in (("optimistic grader", OPTIMISTIC_GRADER), ("strict grader", STRICT_GRADER)):
        records = [GradingRecord(human=h, predicted=p) for h, p in rows]
        report = compute_metrics(records)
        print(f"=== {name} ===")
        print(render_report(report))
        print()
    print(
        "note the trade: the optimistic grader scores higher accuracy but its\n"
        "false-positive rate is the dangerous number in a solving loop, since a\n"
        "false accept ends the search on a wrong proof. The strict grader's\n"
        "false negatives only cost another round of exploration."
    )


if __name__ == "__main__":
    main()
