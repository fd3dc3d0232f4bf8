import os, sys, importlib.util, pytest

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

from bbpeel_core import RichCallbacks, headless_main


@pytest.mark.skipif(importlib.util.find_spec('rich') is None, reason='rich not installed')
def test_rich_progress_mode_runs(capsys):
    rc = headless_main(['decode', '--code', 'kunlun-18', '--rounds', '2', '--p', '0', '--shots', '50',
                        '--progress=rich'])
    assert rc == 0
    assert '[progress-rich] enabled' in capsys.readouterr().out


@pytest.mark.skipif(importlib.util.find_spec('rich') is None, reason='rich not installed')
def test_rich_callbacks_tolerate_updates_before_start():
    cb = RichCallbacks()
    cb.phase('dem', 50)
    cb.progress(1, 2)
    cb.stop()


@pytest.mark.skipif(importlib.util.find_spec('rich') is not None, reason='rich installed')
def test_rich_progress_falls_back_without_rich(capsys):
    rc = headless_main(['code', '--code', 'bb-32', '--progress=rich'])
    assert rc == 0
    assert 'falling back to plain output' in capsys.readouterr().out
