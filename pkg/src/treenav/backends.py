"""Option-scoring backends for the deliberative layer.

The mock backend is the shipped deterministic stand-in: it scores each
caption by semantic co-occurrence with the target category (a shipped
affinity table over labels and room archetypes) plus a bounded bonus for
unexplored volume, and abstains when nothing scores above threshold.

The external backend talks to a chat-completions style HTTP endpoint; the
endpoint and credentials come from environment variables. Responses must
carry a machine-readable score block; anything malformed degrades to
abstention rather than an error.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources

from .config import PolicyConfig
from .narration import OptionCaption, parse_unknown_volume

ENV_ENDPOINT = "TREENAV_BACKEND_URL"
ENV_API_KEY = "TREENAV_API_KEY"
ENV_MODEL = "TREENAV_MODEL"

WIRE_FORMAT = "decision-request-v1"


@dataclass
class ScoreSheet:
    scores: list[int] = field(default_factory=list)
    abstained: bool = False
    rationale: list[str] = field(default_factory=list)

    def __post_init__(self):
        for s in self.scores:
            if not 0 <= s <= 100:
                raise ValueError("scores must lie in [0, 100]")


def load_cooccurrence() -> dict[str, dict[str, int]]:
    return json.loads(
        resources.files("treenav.data").joinpath("cooccurrence.json").read_text())


class MockBackend:
    """Deterministic co-occurrence scorer (no model in the loop)."""

    def __init__(self, cfg: PolicyConfig | None = None):
        self.cfg = cfg or PolicyConfig()
        self.table = load_cooccurrence()

    def decide(self, target: str, options: list[OptionCaption]) -> ScoreSheet:
        affinities = self.table.get(target, {})
        scores = []
        rationale = []
        for opt in options:
            text = opt.text.lower()
            mentioned = [(k, v) for k, v in affinities.items() if k in text]
            base = max((v for _, v in mentioned), default=0)
            volume = parse_unknown_volume(opt.text)
            bonus = min(self.cfg.unknown_bonus_cap,
                        self.cfg.unknown_bonus_per_m3 * volume)
            score = int(round(min(100, base + bonus)))
            scores.append(score)
            why = (f"matched {max(mentioned, key=lambda kv: kv[1])[0]!r} at {base}"
                   if mentioned else "no semantic match")
            if bonus:
                why += f"; +{bonus:.0f} for {volume:.1f} m3 unexplored"
            rationale.append(why)
        abstained = all(s < self.cfg.abstain_below for s in scores)
        return ScoreSheet(scores=scores, abstained=abstained, rationale=rationale)


SCORES_RE = re.compile(r"SCORES\s*:\s*\[([^\]]*)\]", re.IGNORECASE)
ABSTAIN_RE = re.compile(r"^\s*ABSTAIN\s*$", re.IGNORECASE | re.MULTILINE)


def build_prompt(target: str, options: list[OptionCaption]) -> str:
    lines = [
        f"You are choosing where a robot should go next to find: {target}.",
        "Candidate directions:",
    ]
    for opt in options:
        lines.append(f"  {opt.option_index}: {opt.text}")
    lines.append(f"  {len(options)}: none of the above")
    lines.append(
        "Reason step by step about which direction most plausibly leads to "
        "the target, then output exactly one line of the form "
        "SCORES: [s0, s1, ...] with an integer 0-100 per direction "
        "(excluding the none-of-the-above entry), and the single word "
        "ABSTAIN on its own line instead if none apply.")
    return "\n".join(lines)


def parse_scores(text: str, n_options: int) -> ScoreSheet | None:
    """Defensive parse of the model reply; None means unusable."""
    if ABSTAIN_RE.search(text):
        return ScoreSheet(scores=[0] * n_options, abstained=True,
                          rationale=[text.strip()] * n_options)
    m = SCORES_RE.search(text)
    if not m:
        return None
    try:
        scores = [int(float(x)) for x in m.group(1).split(",") if x.strip()]
    except ValueError:
        return None
    if len(scores) != n_options:
        return None
    if any(not 0 <= s <= 100 for s in scores):
        return None
    return ScoreSheet(scores=scores, abstained=False,
                      rationale=[text.strip()] * n_options)


class ExternalBackend:
    """Chat-completions client; endpoint/credentials via environment.

    post_fn(url, headers, payload, timeout) -> response text is injectable
    for tests; the default uses requests. One retry, then abstention.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 30.0,
                 post_fn=None):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        self.api_key = api_key or os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = timeout
        self.post_fn = post_fn or self._requests_post

    @staticmethod
    def _requests_post(url, headers, payload, timeout):
        import requests

        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
        resp.raise_for_status()
        data = resp.json()
        return data["choices"][0]["message"]["content"]

    def decide(self, target: str, options: list[OptionCaption]) -> ScoreSheet:
        if not self.endpoint:
            return ScoreSheet(scores=[0] * len(options), abstained=True,
                              rationale=["no endpoint configured"] * len(options))
        prompt = build_prompt(target, options)
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "metadata": {"format": WIRE_FORMAT},
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        for _ in range(2):  # one retry
            try:
                text = self.post_fn(self.endpoint, headers, payload, self.timeout)
            except Exception:
                continue
            sheet = parse_scores(text, len(options))
            if sheet is not None:
                return sheet
        return ScoreSheet(scores=[0] * len(options), abstained=True,
                          rationale=["backend failure"] * len(options))
