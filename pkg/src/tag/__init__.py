"""Rule-grounded task execution pipeline.

Turns normative documents into verified, operational rule sets, selects the
rules that apply to each task input with pairwise LLM judgments, and executes
tasks with only the selected guidance in context. Includes retrieval and
no-guidance baselines plus scoring and aggregation for benchmark runs.
"""

__version__ = "0.1.0"
