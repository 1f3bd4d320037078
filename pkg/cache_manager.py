import time
import logging
from pathlib import Path

import numpy as np

from monitoring import metrics, structured_logger

logger = logging.getLogger(__name__)

class CacheManager:
    """Derived arrays (frozen stage-1 latents, predicted Mels) keyed by namespace and pair id.

    'memory' keeps arrays in a dict with a TTL; 'disk' also persists them as
    .npy files under `directory` so later commands in the same run reuse them.
    """

    def __init__(self, cache_type='memory', ttl=3600, directory=None, max_items=4096):
        self.cache_type = cache_type
        self.ttl = ttl
        self.max_items = max_items
        self.cache = {}
        self.directory = None

        if cache_type == 'disk':
            self._init_disk(directory)

    def _init_disk(self, directory):
        try:
            if directory is None:
                raise ValueError("no cache directory given")
            self.directory = Path(directory)
            self.directory.mkdir(parents=True, exist_ok=True)
            logger.info(f"Disk cache initialized at {self.directory}")
        except Exception as e:
            logger.warning(f"Disk cache unavailable, using memory cache: {e}")
            self.cache_type = 'memory'
            self.directory = None

    @staticmethod
    def key(namespace, pair_id):
        return f"{namespace}:{pair_id}"

    def _path(self, key):
        return self.directory / (key.replace(':', '__').replace('/', '_') + '.npy')

    def get(self, key):
        try:
            if key in self.cache:
                data, timestamp = self.cache[key]
                if time.time() - timestamp < self.ttl:
                    metrics.record_cache_hit('hit')
                    return data
                del self.cache[key]
            if self.cache_type == 'disk' and self.directory is not None:
                path = self._path(key)
                if path.exists():
                    data = np.load(path, allow_pickle=False)
                    self.cache[key] = (data, time.time())
                    metrics.record_cache_hit('hit')
                    return data
            metrics.record_cache_hit('miss')
            return None
        except Exception as e:
            logger.error(f"Cache get error: {e}")
            return None

    def set(self, key, value):
        try:
            value = np.asarray(value)
            self.cache[key] = (value, time.time())
            if self.cache_type == 'disk' and self.directory is not None:
                np.save(self._path(key), value, allow_pickle=False)
            structured_logger.log_cache_operation('SET', key)
            if len(self.cache) > self.max_items:
                self._cleanup_memory_cache()
        except Exception as e:
            logger.error(f"Cache set error: {e}")

    def get_or_compute(self, key, compute):
        value = self.get(key)
        if value is None:
            value = np.asarray(compute())
            self.set(key, value)
        return value

    def delete(self, key):
        try:
            self.cache.pop(key, None)
            if self.cache_type == 'disk' and self.directory is not None:
                self._path(key).unlink(missing_ok=True)
        except Exception as e:
            logger.error(f"Cache delete error: {e}")

    def clear(self, namespace=None):
        """Drop every entry, or only those of one namespace (e.g. after retraining stage 1)."""
        prefix = f"{namespace}:" if namespace else ''
        for key in [k for k in self.cache if k.startswith(prefix)]:
            del self.cache[key]
        if self.cache_type == 'disk' and self.directory is not None:
            pattern = f"{namespace}__*.npy" if namespace else '*.npy'
            for path in self.directory.glob(pattern):
                path.unlink()

    def _cleanup_memory_cache(self):
        current_time = time.time()
        expired_keys = [
            key for key, (_, timestamp) in self.cache.items()
            if current_time - timestamp >= self.ttl
        ]
        for key in expired_keys:
            del self.cache[key]
        # still over budget: drop the oldest
        overflow = len(self.cache) - self.max_items
        if overflow > 0:
            oldest = sorted(self.cache, key=lambda k: self.cache[k][1])[:overflow]
            for key in oldest:
                del self.cache[key]
