"""AntiSD - desk-scale anti-self-distillation trainer with numerical oracles."""

__version__ = "0.4.0"
__release_date__ = "2026-10-19"
__author__ = "Frank Schäfer"
