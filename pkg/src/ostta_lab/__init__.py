"""Desk-scale open-set test-time adaptation laboratory.

A small numpy stack for studying online adaptation on streams that mix
covariate-shifted in-distribution (csID) samples with covariate-shifted
unknown-class (csOOD) samples: a tiny batch-norm backbone, the adaptation
losses, a bank of OOD detectors, open-set metrics, synthetic shift streams,
and an experiment harness with a CLI.
"""

__version__ = "0.1.0"
