"""Speaker verification and diarization toolkit.

Submodules: ``uio`` (shard IO), ``featpipe`` (on-the-fly features),
``embedder`` (TDNN forward pass), ``losses`` (margin softmax family and
schedulers), ``backend`` (cosine/PLDA/AS-Norm scoring and metrics),
``diarize`` (spectral-clustering diarization and DER), ``cli``.
"""

__version__ = "0.1.0"
