import os, sys, json, shlex, subprocess, importlib.util

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

import bbpeel_core  # ensure importable
from bbpeel_core import ExperimentConfig, _build_repro_command_from_config
from bbpeel_decoder import DecoderConfig

PY_EXEC = sys.executable
SCRIPT = os.path.join(BASE, 'bbpeel.py')


def run_cli(args: list[str]):
    return subprocess.run([PY_EXEC, SCRIPT] + args, capture_output=True, text=True)


def test_print_repro_outputs_command():
    r = run_cli(['decode', '--code', 'bb-32', '--rounds', '6', '--p', '0.002', '--compare-bp', '--no-pairs',
                 '--print-repro'])
    assert r.returncode == 0, r.stderr
    tokens = shlex.split(r.stdout.strip())
    assert tokens[:3] == ['python', 'bbpeel.py', 'decode']
    assert '--code=bb-32' in tokens and '--rounds=6' in tokens and '--p=0.002' in tokens
    assert '--compare-bp' in tokens and '--no-pairs' in tokens
    # defaults are left out
    assert not any(t.startswith(('--shots', '--seed', '--peel-mode')) for t in tokens)


def test_repro_command_defaults_only():
    assert _build_repro_command_from_config(ExperimentConfig(mode='theory')) == ['python', 'bbpeel.py', 'theory']
    cfg = ExperimentConfig(mode='stream', code='bb-32', window_rounds=3, decoder=DecoderConfig(osd_sweep_width=10))
    assert _build_repro_command_from_config(cfg) == ['python', 'bbpeel.py', 'stream', '--code=bb-32',
                                                     '--window-rounds=3', '--osd-order=10']


def test_dry_run_json_logs():
    r = run_cli(['decode', '--code', 'kunlun-18', '--rounds', '3', '--dry-run', '--json-logs'])
    assert r.returncode == 0, r.stderr
    data = json.loads(r.stdout)
    assert 'dry_run_plan' in data
    plan = data['dry_run_plan']
    assert plan['code'] == 'kunlun-18' and plan['n'] == 18 and plan['k'] == 4
    assert plan['detectors'] == 36
    assert plan['predicted_faults'] == 207
    assert plan['arms'] == ['greedy'] and plan['issues'] is None


def test_dry_run_plain_summary():
    r = run_cli(['code', '--code', 'bb-32', '--dry-run'])
    assert r.returncode == 0, r.stderr
    assert '[dry-run] Plan summary:' in r.stdout
    assert '- code: bb-32' in r.stdout


def test_dry_run_reports_missing_bp_dependency():
    r = run_cli(['decode', '--code', 'kunlun-18', '--compare-bp', '--dry-run', '--json-logs'])
    plan = json.loads(r.stdout)['dry_run_plan']
    assert plan['arms'] == ['greedy', 'bp']
    if importlib.util.find_spec('ldpc') is None:
        assert r.returncode == 12 and 'ldpc missing (BP-only arm)' in plan['issues']
    else:
        assert r.returncode == 0


def test_dry_run_unknown_code():
    r = run_cli(['dem', '--code', 'bb-9999', '--dry-run'])
    assert r.returncode == 16
