#!/usr/bin/env python3
"""
Test caching and monitoring components
"""
import logging
import time

import numpy as np
import pytest


def test_cache_manager():
    from cache_manager import CacheManager

    print("Testing Cache Manager:")

    # Test memory cache
    cache = CacheManager('memory', ttl=0.2)
    value = np.arange(6.0).reshape(2, 3)
    cache.set(CacheManager.key('z_m', 's000'), value)
    result = cache.get('z_m:s000')
    np.testing.assert_array_equal(result, value)
    print("  Memory cache set/get: PASS")

    # Test TTL
    time.sleep(0.3)
    assert cache.get('z_m:s000') is None
    print("  Memory cache TTL: PASS")

    # Test disk fallback (when no directory is given)
    fallback = CacheManager('disk')
    assert fallback.cache_type == 'memory'
    print("  Disk fallback: PASS")


def test_disk_cache_survives_a_new_manager(tmp_path):
    from cache_manager import CacheManager

    first = CacheManager('disk', directory=tmp_path / 'cache')
    first.set('pred_mel:sub00_ses0_s001', np.ones((80, 4), dtype=np.float32))
    first.set('z_m:s001', np.zeros((3, 20, 8), dtype=np.float32))

    second = CacheManager('disk', directory=tmp_path / 'cache')
    loaded = second.get('pred_mel:sub00_ses0_s001')
    assert loaded.shape == (80, 4) and loaded.dtype == np.float32

    calls = []
    second.get_or_compute('z_m:s002', lambda: calls.append(1) or np.full(2, 3.0))
    second.get_or_compute('z_m:s002', lambda: calls.append(1) or np.full(2, 3.0))
    assert len(calls) == 1

    second.clear('z_m')
    assert second.get('z_m:s001') is None
    assert CacheManager('disk', directory=tmp_path / 'cache').get('z_m:s002') is None
    assert second.get('pred_mel:sub00_ses0_s001') is not None

    second.delete('pred_mel:sub00_ses0_s001')
    assert CacheManager('disk', directory=tmp_path / 'cache').get('pred_mel:sub00_ses0_s001') is None


def test_memory_budget():
    from cache_manager import CacheManager

    cache = CacheManager('memory', max_items=3)
    for i in range(5):
        cache.set(f"z_m:{i}", np.asarray([i]))
    assert len(cache.cache) == 3
    assert cache.get('z_m:4') is not None


def test_metrics_collector(tmp_path):
    from monitoring import MetricsCollector

    print("\nTesting Metrics Collector:")

    metrics = MetricsCollector()

    # Test stage recording
    metrics.record_stage('stage1', 1.5)
    metrics.record_stage('stage2', 0.5, success=False)

    # Test cache recording
    metrics.record_cache_hit('hit')
    metrics.record_cache_hit('miss')

    # Test epoch recording
    metrics.record_epoch('stage1', 1, 0.9, 1.0, 2e-4)
    metrics.record_early_stop('stage1')

    stats = metrics.get_stats()

    assert stats['stages_run'] == 2
    assert stats['stage_errors'] == 1
    assert stats['cache_hit_rate'] == 0.5
    assert stats['epochs'] == 1 and stats['early_stops'] == 1
    assert stats['stage1_seconds'] == 1.5
    print("  Stage and cache counters: PASS")

    metrics.write_csv(tmp_path / 'run_stats.csv')
    lines = (tmp_path / 'run_stats.csv').read_text().splitlines()
    assert lines[0] == 'name,value'
    assert 'stages_run,2' in lines

    metrics.reset()
    assert metrics.get_stats()['stages_run'] == 0


def test_monitor_stage(caplog):
    from monitoring import metrics, monitor_stage

    @monitor_stage('demo')
    def ok():
        return 42

    @monitor_stage('demo_fail')
    def broken():
        raise RuntimeError('boom')

    runs = metrics.counters['demo_runs']
    with caplog.at_level(logging.INFO, logger='neurotext'):
        assert ok() == 42
        with pytest.raises(RuntimeError):
            broken()
    assert metrics.counters['demo_runs'] == runs + 1
    assert metrics.error_counts['demo_fail_errors'] >= 1
    messages = [r.getMessage() for r in caplog.records]
    assert any(m.startswith('STAGE demo START') for m in messages)
    assert any(m.startswith('STAGE demo_fail FAILED') for m in messages)


def test_structured_logger(caplog):
    from monitoring import StructuredLogger

    print("\nTesting Structured Logger:")

    log = StructuredLogger('neurotext.test')
    with caplog.at_level(logging.INFO, logger='neurotext.test'):
        log.log_epoch('stage2', 3, 0.5, 0.25, 1e-4)
        log.log_eval('brain', {'bleu1': 81.5, 'teacher_forcing': 'off'})
        log.log_cache_operation('GET', 'z_m:s001', hit=False)
        log.log_error('stage3', 'diverged', {'epoch': 2})
    messages = [r.getMessage() for r in caplog.records]
    assert messages[0] == 'EPOCH stage2 3 - train=0.500000 valid=0.250000 lr=1.000e-04'
    assert messages[1] == 'EVAL brain bleu1=81.5000 teacher_forcing=off'
    assert messages[2] == 'CACHE GET z_m:s001 - MISS'
    assert caplog.records[3].levelname == 'ERROR'
    print("  Structured logging: PASS")


if __name__ == "__main__":
    print("Testing Caching and Monitoring Components")
    print("=" * 45)

    test_cache_manager()
    test_memory_budget()

    print("\n" + "=" * 45)
    print("Caching and monitoring tests complete!")
