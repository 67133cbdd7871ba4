"""genjudge: a batch harness that measures how an LLM's ability to generate
correct answers relates to its ability to judge other models' answers.

Two stages: every model first answers a sampled task, then a designated judge
scores each agent answer pointwise.  The analysis layer correlates the judge's
own correctness with its verdict quality, controlling for the difficulty
signal carried by the agent's correctness.
"""

__version__ = "0.1.0"

__all__ = [
    "corpus",
    "prompts",
    "extraction",
    "providers",
    "pipeline",
    "metrics",
    "report",
    "cli",
]
