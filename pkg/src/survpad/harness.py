"""Two-phase challenge simulator: label access control, submission checks,
budgets, leaderboards and the published final-ranking fixture."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import ProtocolManifest
from .metrics import MetricReport, evaluate_split, evaluate_submission, rank

# Final ranking as published: team, ACER, APCER, BPCER, AUC (percent).
TABLE3 = (
    ("MateoH", "4.73", "5.07", "4.38", "98.38"),
    ("CTEL_AI", "5.56", "9.20", "1.91", "98.21"),
    ("horsego", "6.22", "8.17", "4.26", "96.97"),
    ("hexianhua", "7.08", "11.21", "2.94", "97.83"),
    ("OPDAI", "7.16", "9.18", "5.13", "97.38"),
    ("SeaRecluse", "9.89", "15.92", "3.86", "96.02"),
    ("XiangR", "9.96", "11.35", "8.57", "95.80"),
    ("Chenyifan", "11.01", "14.12", "7.89", "94.39"),
    ("ioNetworks", "12.00", "15.47", "8.53", "95.13"),
)


def table3_reports() -> dict[str, MetricReport]:
    """Published rates as reports; ACER is recomputed from APCER and BPCER."""
    return {
        team: MetricReport.from_rates(float(Decimal(ap) / 100), float(Decimal(bp) / 100), float(Decimal(au) / 100))
        for team, _, ap, bp, au in TABLE3
    }


def percent(rate: float, places: int = 2) -> str:
    """Rate in [0, 1] as a percent string, rounded half-up."""
    d = Decimal(f"{rate * 100:.10f}")
    return str(d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


# --------------------------------------------------------------------------
# Phases and label access

PHASES = ("development", "final")


class LabelAccessError(PermissionError):
    """A team asked for labels its phase does not expose."""


class BudgetExceededError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    submission_budget_per_day: int | None
    labels_visible: frozenset[str]

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def scored_splits(self) -> tuple[str, ...]:
        return ("dev",) if self.phase == "development" else ("dev", "test")


def development_phase(budget: int | None = None) -> PhaseConfig:
    return PhaseConfig("development", budget, frozenset({"train"}))


def final_phase(budget: int = 2) -> PhaseConfig:
    return PhaseConfig("final", budget, frozenset({"train", "dev"}))


class LabelVault:
    """Organizer-side ground truth. Teams only ever see a :class:`TeamView`."""

    def __init__(self, manifest: ProtocolManifest, labels: Mapping[str, int],
                 features: Mapping[str, np.ndarray] | None = None):
        self.manifest = manifest
        self._labels = {s: {i: int(labels[i]) for i in manifest.ids(s)} for s in ("train", "dev", "test")}
        self._features = features

    def expected_ids(self, phase: PhaseConfig) -> list[str]:
        return [i for s in phase.scored_splits for i in self.manifest.ids(s)]

    def view(self, phase: PhaseConfig) -> "TeamView":
        return TeamView(self, phase)

    def _organizer_labels(self, split: str) -> dict[str, int]:
        return self._labels[split]


class TeamView:
    """What a participant may read in a given phase."""

    def __init__(self, vault: LabelVault, phase: PhaseConfig):
        self._vault = vault
        self.phase = phase

    def ids(self, split: str) -> list[str]:
        return list(self._vault.manifest.ids(split))

    def submission_ids(self) -> list[str]:
        return self._vault.expected_ids(self.phase)

    def features(self, split: str) -> np.ndarray:
        if self._vault._features is None:
            raise LookupError("this challenge publishes no features")
        return np.array([self._vault._features[i] for i in self.ids(split)], dtype=float)

    def labels(self, split: str) -> dict[str, int]:
        if split not in self.phase.labels_visible:
            raise LabelAccessError(f"{split} labels are not available in the {self.phase.phase} phase")
        return dict(self._vault._organizer_labels(split))


# --------------------------------------------------------------------------
# Submission validation


@dataclass
class ValidationResult:
    ok: bool
    errors: list[str] = field(default_factory=list)
    scores: dict[str, float] = field(default_factory=dict)


def validate_submission(text: str, expected_ids: Iterable[str]) -> ValidationResult:
    """Check a ``sample_id,score`` CSV against the expected id set.

    Rejects a wrong header, rows with the wrong column count, duplicate,
    unknown or missing ids, and scores that are not finite numbers in [0, 1].
    Every problem is reported, with its row number where there is one.
    """
    expected = list(expected_ids)
    expected_set = set(expected)
    errors: list[str] = []
    scores: dict[str, float] = {}
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["sample_id", "score"]:
        got = ",".join(rows[0]) if rows else "<empty file>"
        errors.append(f"row 1: header must be 'sample_id,score', got {got!r}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 2:
            errors.append(f"row {lineno}: expected 2 columns, got {len(row)}")
            continue
        sid, raw = row[0].strip(), row[1].strip()
        try:
            value = float(raw)
        except ValueError:
            errors.append(f"row {lineno}: score {raw!r} is not a number")
            continue
        if not math.isfinite(value):
            errors.append(f"row {lineno}: score {raw!r} is not finite")
            continue
        if not (0.0 <= value <= 1.0):
            errors.append(f"row {lineno}: score {raw!r} outside [0, 1]")
            continue
        if sid not in expected_set:
            errors.append(f"row {lineno}: unknown id {sid!r}")
            continue
        if sid in scores:
            errors.append(f"row {lineno}: duplicate id {sid!r}")
            continue
        scores[sid] = value
    missing = [i for i in expected if i not in scores]
    if missing:
        errors.append(f"missing ids: {', '.join(missing)}")
    return ValidationResult(not errors, errors, scores if not errors else {})


def scores_to_csv(scores: Mapping[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "score"])
    for k, v in scores.items():
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Scoring and budgets


class BudgetLedger:
    """Accepted-submission counts per (team, phase, day); one writer at a time."""

    def __init__(self, phases: Mapping[str, PhaseConfig]):
        self.phases = dict(phases)
        self.counts: dict[tuple[str, str, int], int] = {}

    def used(self, team: str, phase: str, day: int) -> int:
        return self.counts.get((team, phase, day), 0)

    def check(self, team: str, phase: str, day: int) -> None:
        budget = self.phases[phase].submission_budget_per_day
        used = self.used(team, phase, day)
        if budget is not None and used >= budget:
            raise BudgetExceededError(f"{team}: {phase} budget of {budget}/day used up on day {day} ({used} accepted)")

    def record(self, team: str, phase: str, day: int) -> None:
        self.counts[(team, phase, day)] = self.used(team, phase, day) + 1


def score_submission(scores: Mapping[str, float], vault: LabelVault, phase: PhaseConfig) -> MetricReport:
    """Development phase: dev metrics at the dev EER threshold. Final phase:
    the dev EER threshold transferred to the test set."""
    dev_labels = vault._organizer_labels("dev")
    dev_scores = {i: scores[i] for i in dev_labels if i in scores}
    if phase.phase == "development":
        return evaluate_split(scores, dev_labels)
    test_labels = vault._organizer_labels("test")
    test_scores = {i: s for i, s in scores.items() if i not in dev_labels}
    return evaluate_submission(dev_scores, dev_labels, test_scores, test_labels)


# --------------------------------------------------------------------------
# Leaderboards


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    team: str
    acer: float
    apcer: float
    bpcer: float
    auc: float


@dataclass
class Leaderboard:
    rows: list[LeaderboardRow]
    basis: str = "last"

    @classmethod
    def from_reports(cls, reports: Mapping[str, MetricReport], basis: str = "last") -> "Leaderboard":
        rows = [LeaderboardRow(i, team, r.acer, r.apcer, r.bpcer, r.auc)
                for i, (team, r) in enumerate(rank(reports), start=1)]
        return cls(rows, basis)

    def teams(self) -> list[str]:
        return [r.team for r in self.rows]

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Leaderboard":
        return cls([LeaderboardRow(**row) for row in json.loads(text)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "team", "acer", "apcer", "bpcer", "auc"])
        for r in self.rows:
            w.writerow([r.rank, r.team, repr(r.acer), repr(r.apcer), repr(r.bpcer), repr(r.auc)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Leaderboard":
        reader = csv.DictReader(io.StringIO(text))
        return cls([LeaderboardRow(int(r["rank"]), r["team"], float(r["acer"]), float(r["apcer"]),
                                   float(r["bpcer"]), float(r["auc"])) for r in reader])

    def render(self) -> str:
        header = ["R.", "Team", "ACER(%)", "APCER(%)", "BPCER(%)", "AUC(%)"]
        body = [[str(r.rank), r.team, percent(r.acer), percent(r.apcer), percent(r.bpcer), percent(r.auc)]
                for r in self.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
        return "\n".join(lines) + "\n"


def report(leaderboard: Leaderboard, out_dir: str | Path | None = None) -> dict[str, str]:
    """Render the leaderboard as a text table, JSON and CSV; write them to ``out_dir`` if given."""
    artifacts = {
        "leaderboard.txt": leaderboard.render(),
        "leaderboard.json": leaderboard.to_json(),
        "leaderboard.csv": leaderboard.to_csv(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in artifacts.items():
            (out / name).write_text(text)
    return artifacts


# --------------------------------------------------------------------------
# Challenge simulation

TeamFn = Callable[[TeamView, int], Sequence["str | Mapping[str, float] | MetricReport"]]


@dataclass
class ChallengeConfig:
    dev_days: int = 2
    final_days: int = 2
    dev_budget: int | None = None
    final_budget: int = 2

    def phases(self) -> dict[str, PhaseConfig]:
        return {"development": development_phase(self.dev_budget), "final": final_phase(self.final_budget)}


@dataclass
class ChallengeResult:
    leaderboard: Leaderboard
    dev_leaderboard: Leaderboard
    audit: list[dict]
    final_reports: dict[str, MetricReport]

    def audit_jsonl(self) -> str:
        return "".join(json.dumps(a, sort_keys=True) + "\n" for a in self.audit)


def run_challenge(config: ChallengeConfig, teams: Mapping[str, TeamFn], vault: LabelVault) -> ChallengeResult:
    """Simulate the development and final phases day by day.

    Each team callable receives its phase-restricted view and the day number
    and returns the submissions it attempts that day: CSV text, an id-to-score
    map, or a pre-computed :class:`MetricReport` (recorded as injected). Every
    decision goes to the audit log; failures never stop the run. Rankings use
    each team's last accepted submission.
    """
    phases = config.phases()
    ledger = BudgetLedger(phases)
    audit: list[dict] = []
    last: dict[str, dict[str, MetricReport]] = {"development": {}, "final": {}}
    seq: dict[str, int] = {t: 0 for t in teams}
    schedule = [("development", d) for d in range(config.dev_days)]
    schedule += [("final", config.dev_days + d) for d in range(config.final_days)]
    for phase_name, day in schedule:
        phase = phases[phase_name]
        for team in sorted(teams):
            entry_base = {"phase": phase_name, "day": day, "team": team}
            try:
                attempts = list(teams[team](vault.view(phase), day))
            except Exception as exc:  # team code is untrusted
                audit.append({**entry_base, "seq": None, "status": "error",
                              "reason": f"{type(exc).__name__}: {exc}"})
                continue
            for content in attempts:
                seq[team] += 1
                entry = {**entry_base, "seq": seq[team]}
                try:
                    ledger.check(team, phase_name, day)
                except BudgetExceededError as exc:
                    audit.append({**entry, "status": "rejected", "reason": str(exc),
                                  "used_today": ledger.used(team, phase_name, day)})
                    continue
                if isinstance(content, MetricReport):
                    rep = content
                    entry["injected"] = True
                else:
                    text = content if isinstance(content, str) else scores_to_csv(content)
                    result = validate_submission(text, vault.expected_ids(phase))
                    if not result.ok:
                        audit.append({**entry, "status": "rejected", "reason": "; ".join(result.errors)})
                        continue
                    try:
                        rep = score_submission(result.scores, vault, phase)
                    except ValueError as exc:
                        audit.append({**entry, "status": "rejected", "reason": str(exc)})
                        continue
                ledger.record(team, phase_name, day)
                last[phase_name][team] = rep
                audit.append({**entry, "status": "accepted", "report": rep.to_dict()})
    return ChallengeResult(
        Leaderboard.from_reports(last["final"]),
        Leaderboard.from_reports(last["development"]),
        audit,
        dict(last["final"]),
    )


# --------------------------------------------------------------------------
# Scripted teams


def _fisher_direction(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    mu1, mu0 = x[y == 1].mean(axis=0), x[y == 0].mean(axis=0)
    sw = np.cov(x[y == 1].T) + np.cov(x[y == 0].T) + 1e-6 * np.eye(x.shape[1])
    return np.linalg.solve(sw, mu1 - mu0)


def lda_team(noise: float = 0.0, seed: int = 0, attempts_per_day: int = 1) -> TeamFn:
    """A participant that fits Fisher's discriminant on visible labels and squashes the projection."""

    def team(view: TeamView, day: int):
        rng = np.random.default_rng([seed, day])
        xs, ys = [], []
        for split in sorted(view.phase.labels_visible):
            labels = view.labels(split)
            xs.append(view.features(split))
            ys.append(np.array([labels[i] for i in view.ids(split)]))
        x, y = np.concatenate(xs), np.concatenate(ys)
        w = _fisher_direction(x, y)
        mid = 0.5 * (x[y == 1].mean(axis=0) + x[y == 0].mean(axis=0)) @ w
        out = []
        for _ in range(attempts_per_day):
            scores = {}
            for split in view.phase.scored_splits:
                proj = view.features(split) @ w - mid
                proj = proj / (np.std(proj) + 1e-12) + noise * rng.standard_normal(len(proj))
                scores.update(zip(view.ids(split), (1 / (1 + np.exp(-proj))).tolist()))
            out.append(scores)
        return out

    return team


def random_team(seed: int = 0, attempts_per_day: int = 1) -> TeamFn:
    def team(view: TeamView, day: int):
        rng = np.random.default_rng([seed, day])
        ids = view.submission_ids()
        return [dict(zip(ids, rng.random(len(ids)).tolist())) for _ in range(attempts_per_day)]

    return team


def injected_team(report: MetricReport, attempts_per_day: int = 1) -> TeamFn:
    """Submits a fixed report in the final phase only."""

    def team(view: TeamView, day: int):
        return [report] * attempts_per_day if view.phase.phase == "final" else []

    return team
