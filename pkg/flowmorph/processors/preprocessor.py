from typing import Dict, Any, Optional

import numpy as np

from flowmorph.config import DEFAULT_CONFIG
from flowmorph.geometry.mesh import Mesh, PointCloud, normalize_to_unit, sample_surface


class ShapePreprocessor:
    def __init__(self, config=None):
        self.config = config if config else DEFAULT_CONFIG

        self.options = {
            'normalize': True,
            'drop_unused_vertices': False,
            'keep_labels': True,
        }

        if self.config:
            self.options.update(self.config.get('preprocessing', {}) or {})

    def process(self, mesh: Mesh) -> Dict[str, Any]:
        if mesh.num_vertices == 0:
            return {
                'original': mesh,
                'mesh': mesh,
                'scale': 1.0,
                'offset': np.zeros(3),
                'changes_made': [],
            }

        processed = mesh
        changes_made = []
        scale, offset = 1.0, np.zeros(3)

        if not self.options.get('keep_labels', True) and processed.labels is not None:
            processed = Mesh(processed.vertices, processed.faces)
            changes_made.append('dropped_labels')

        if self.options.get('drop_unused_vertices', False):
            new_mesh = self._drop_unused_vertices(processed)
            if new_mesh.num_vertices != processed.num_vertices:
                changes_made.append('dropped_unused_vertices')
                processed = new_mesh

        if self.options.get('normalize', True):
            new_mesh, scale, offset = normalize_to_unit(processed)
            if scale != 1.0 or np.any(offset != 0.0):
                changes_made.append('normalized')
                processed = new_mesh

        return {
            'original': mesh,
            'mesh': processed,
            'scale': scale,
            'offset': offset,
            'changes_made': changes_made,
        }

    def _drop_unused_vertices(self, mesh: Mesh) -> Mesh:
        used = np.unique(mesh.faces)
        remap = -np.ones(mesh.num_vertices, dtype=np.int64)
        remap[used] = np.arange(used.shape[0])
        labels = mesh.labels[used] if mesh.labels is not None else None
        return Mesh(mesh.vertices[used], remap[mesh.faces], labels)

    def corrupt_observation(self, mesh: Mesh, n: Optional[int] = None, sigma: Optional[float] = None,
                            seed: Optional[int] = 0) -> PointCloud:
        """Sparse noisy surface samples, the benchmark input for reconstruction."""
        n = int(n if n is not None else self.config.get('metrics.observation_points', 300))
        sigma = float(sigma if sigma is not None else self.config.get('metrics.noise_std', 0.05))
        rng = np.random.default_rng(seed)
        clean = sample_surface(mesh, n, seed=int(rng.integers(0, 2**31 - 1)))
        noisy = clean.points + rng.normal(0.0, sigma, size=clean.points.shape)
        return PointCloud(noisy, clean.labels)

    def set_option(self, option_name: str, value: bool):
        if option_name in self.options:
            self.options[option_name] = value

    def get_options(self) -> Dict[str, bool]:
        return self.options.copy()
