"""Tool-integrated reasoning lab: a synthetic long-video sandbox, a hierarchical
retrieval toolkit, a tolerant action parser, group-relative advantages with
per-tool credit assignment, a tabular policy trainer and a synthesis pipeline."""

__version__ = "0.1.0"
