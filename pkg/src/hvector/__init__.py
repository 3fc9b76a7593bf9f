"""Speaker embeddings from hierarchical attention over speech fragments.

A self-contained stack: a numpy-backed reverse-mode tensor engine
(:mod:`hvector.tensor`), an MFCC front end with energy VAD
(:mod:`hvector.audio`), three utterance encoders — the hierarchical
attention network plus TDNN baselines with plain or attentive pooling
(:mod:`hvector.model`) — Adam training (:mod:`hvector.train`),
identification and PLDA/EER verification scoring (:mod:`hvector.scoring`),
a synthetic-speaker corpus generator (:mod:`hvector.corpus`), and a
command-line pipeline (:mod:`hvector.cli`).
"""

__version__ = "0.1.0"
