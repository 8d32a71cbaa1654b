"""FastBVP: lightweight BVP extraction from facial spatial-temporal maps.

Modules: ``stmap`` (maps, color conversion, normalization), ``spectral``
(DCT band decomposition), ``nn`` (1-D layers with hand-written gradients),
``srrn`` (the refinement/reconstruction network and its budget), ``train``
(loss, oversampling, two-phase training), ``physio`` (HR/HRV, metrics,
GREEN/CHROM/POS baselines), ``synth`` (synthetic corpora) and ``cli``.
"""

__version__ = "0.1.0"
