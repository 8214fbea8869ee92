"""Movie-level video instruction dataset synthesis pipeline.

Builds full movie plots from theme phrases through staged LLM prompting,
renders style-consistent keyframes through a text-to-image backend, packages
QA instruction records, and ships the keyframe quality metrics and the
pairwise judge benchmark harness used to evaluate the results.
"""

__version__ = "0.1.0"
