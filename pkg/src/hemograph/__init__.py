"""Graph-transformer surrogate for blood flow in vessels with aneurysms.

Subpackages are organised along the pipeline: ``meshio`` (geometry, synthetic
cases and file formats), ``graph`` (adjacency masks), ``tensor`` (kernels with
manual backward passes), ``model``, ``train``, ``rollout``, ``hemo`` and the
``cli`` entry point.
"""

__version__ = "0.1.0"
