"""Autonomous tuning engine for parallel file systems.

The package splits into:

* ``core``         shared domain types, configuration validation, trial stats
* ``expr``         the bound-expression language for dependent parameter ranges
* ``manual_index`` manual chunking, vector retrieval, and parameter extraction
* ``trace``        trace-dump ingestion and the constrained analysis toolset
* ``agent``        model providers, the tool-calling loop, transcripts
* ``runner``       execution backends (shell and simulated) and the grid oracle
* ``tuning``       the tuning controller, rule sets, and the offline policy
* ``cli``          command-line surface
"""

__version__ = "0.1.0"
