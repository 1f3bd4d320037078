import csv
import time
import logging
from datetime import datetime
from collections import defaultdict, deque
from functools import wraps
from pathlib import Path

logger = logging.getLogger(__name__)

class MetricsCollector:
    def __init__(self, max_history=1000):
        self.metrics = defaultdict(list)
        self.counters = defaultdict(int)
        self.stage_times = defaultdict(float)
        self.step_times = deque(maxlen=max_history)
        self.error_counts = defaultdict(int)
        self.start_time = datetime.now()

    def record_stage(self, stage, seconds, success=True):
        self.counters['stages_run'] += 1
        self.counters[f'{stage}_runs'] += 1
        self.stage_times[stage] += seconds
        if not success:
            self.error_counts[f'{stage}_errors'] += 1
            self.counters['stage_errors'] += 1

    def record_epoch(self, stage, epoch, train_loss, valid_loss, lr):
        self.counters['epochs'] += 1
        self.metrics[f'{stage}_train_loss'].append(train_loss)
        self.metrics[f'{stage}_valid_loss'].append(valid_loss)
        self.metrics[f'{stage}_lr'].append(lr)

    def record_step(self, seconds):
        self.counters['steps'] += 1
        self.step_times.append(seconds)

    def record_cache_hit(self, cache_type='hit'):
        self.counters[f'cache_{cache_type}'] += 1

    def record_checkpoint(self):
        self.counters['checkpoints_saved'] += 1

    def record_early_stop(self, stage):
        self.counters['early_stops'] += 1
        self.counters[f'{stage}_early_stops'] += 1

    def record_divergence(self, stage):
        self.counters['divergences'] += 1
        self.error_counts[f'{stage}_divergences'] += 1

    def get_stats(self):
        uptime = (datetime.now() - self.start_time).total_seconds()
        avg_step_time = sum(self.step_times) / len(self.step_times) if self.step_times else 0

        stats = {
            'uptime_seconds': round(uptime, 3),
            'stages_run': self.counters['stages_run'],
            'stage_errors': self.counters['stage_errors'],
            'epochs': self.counters['epochs'],
            'steps': self.counters['steps'],
            'avg_step_time': round(avg_step_time, 4),
            'checkpoints_saved': self.counters['checkpoints_saved'],
            'early_stops': self.counters['early_stops'],
            'divergences': self.counters['divergences'],
            'cache_hits': self.counters['cache_hit'],
            'cache_misses': self.counters['cache_miss'],
            'cache_hit_rate': self.counters['cache_hit'] / max(self.counters['cache_hit'] + self.counters['cache_miss'], 1),
        }
        for stage, seconds in sorted(self.stage_times.items()):
            stats[f'{stage}_seconds'] = round(seconds, 3)
        return stats

    def write_csv(self, path):
        """One `name,value` row per statistic (run_stats.csv)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['name', 'value'])
            for name, value in self.get_stats().items():
                writer.writerow([name, value])

    def reset(self):
        self.__init__(max_history=self.step_times.maxlen)

# Global metrics collector
metrics = MetricsCollector()

def monitor_stage(stage_name):
    def decorator(f):
        @wraps(f)
        def wrapper(*args, **kwargs):
            start_time = time.time()
            structured_logger.log_stage(stage_name, 'START')
            try:
                result = f(*args, **kwargs)
            except Exception as e:
                elapsed = time.time() - start_time
                metrics.record_stage(stage_name, elapsed, success=False)
                structured_logger.log_stage(stage_name, 'FAILED', f"{elapsed:.1f}s - {e}")
                raise
            elapsed = time.time() - start_time
            metrics.record_stage(stage_name, elapsed, success=True)
            structured_logger.log_stage(stage_name, 'DONE', f"{elapsed:.1f}s")
            return result
        return wrapper
    return decorator

class StructuredLogger:
    def __init__(self, name):
        self.logger = logging.getLogger(name)

    def log_stage(self, stage, event, details=None):
        suffix = f" - {details}" if details else ""
        self.logger.info(f"STAGE {stage} {event}{suffix}")

    def log_epoch(self, stage, epoch, train_loss, valid_loss, lr):
        self.logger.info(
            f"EPOCH {stage} {epoch} - train={train_loss:.6f} valid={valid_loss:.6f} lr={lr:.3e}"
        )

    def log_checkpoint(self, operation, path):
        self.logger.info(f"CHECKPOINT {operation} {path}")

    def log_eval(self, mode, values):
        body = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
        self.logger.info(f"EVAL {mode} {body}")

    def log_cache_operation(self, operation, key, hit=None):
        status = f"HIT" if hit else "MISS" if hit is False else "SET"
        self.logger.info(f"CACHE {operation} {key} - {status}")

    def log_error(self, component, error, context=None):
        context_str = f" - Context: {context}" if context else ""
        self.logger.error(f"ERROR {component} - {error}{context_str}")

# Global structured logger
structured_logger = StructuredLogger('neurotext')
