import os, sys, json, tempfile, shutil, subprocess

BASE = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE not in sys.path:
    sys.path.insert(0, BASE)

SCRIPT = os.path.join(BASE, 'bbpeel.py')
PY = sys.executable


def run_cli(args):
    return subprocess.run([PY, SCRIPT] + args, capture_output=True, text=True)


def _write_config(tmp, data):
    path = os.path.join(tmp, 'conf.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f)
    return path


def test_config_file_merge_for_decoder_settings():
    tmp = tempfile.mkdtemp(prefix='bbpeel_cfgmerge_')
    try:
        cfg_path = _write_config(tmp, {"schema": 1, "code": "kunlun-18", "shots": 77, "compare_bp": True,
                                       "peel_mode": "batch", "p_grid": [0.001, 0.002]})
        # Only the verb on the command line; everything else comes from the config
        r = run_cli(['sweep', '--config', cfg_path, '--print-repro'])
        assert r.returncode == 0, r.stderr
        out = r.stdout.strip()
        assert out.startswith('python bbpeel.py sweep')
        assert '--code=kunlun-18' in out and '--shots=77' in out and '--compare-bp' in out
        assert '--peel-mode=batch' in out and '--p-grid=0.001,0.002' in out
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def test_command_line_value_wins_over_config():
    tmp = tempfile.mkdtemp(prefix='bbpeel_cfgmerge_')
    try:
        cfg_path = _write_config(tmp, {"schema": 1, "code": "kunlun-18", "shots": 77})
        r = run_cli(['decode', '--config', cfg_path, '--shots', '55', '--print-repro'])
        assert r.returncode == 0, r.stderr
        assert '--shots=55' in r.stdout and '--shots=77' not in r.stdout
        assert '--code=kunlun-18' in r.stdout
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def test_invalid_config_files_exit_16():
    tmp = tempfile.mkdtemp(prefix='bbpeel_cfgmerge_')
    try:
        for data in ({"shots": 77},                          # schema missing
                     {"schema": 2},                          # wrong schema version
                     {"schema": 1, "bogus_option": True},    # unknown key
                     {"schema": 1, "shots": 0},
                     {"schema": 1, "p": 0.5}):
            r = run_cli(['decode', '--config', _write_config(tmp, data), '--print-repro'])
            assert r.returncode == 16, (data, r.stdout, r.stderr)
            assert '[config]' in r.stdout
        r = run_cli(['decode', '--config', os.path.join(tmp, 'missing.json')])
        assert r.returncode == 16
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def test_nested_decoder_block_and_deprecated_flat_keys():
    tmp = tempfile.mkdtemp(prefix='bbpeel_cfgmerge_')
    try:
        cfg_path = _write_config(tmp, {"schema": 1, "code": "kunlun-18",
                                       "decoder": {"mode": "single", "pair_top_k": 12, "osd_sweep_width": 4,
                                                   "use_pairs": False, "predicate": "truth"}})
        r = run_cli(['theory', '--config', cfg_path, '--print-repro'])
        assert r.returncode == 0, r.stderr
        for flag in ('--peel-mode=single', '--pair-top-k=12', '--osd-order=4', '--no-pairs', '--peel-predicate=truth'):
            assert flag in r.stdout, flag
        assert 'deprecated' not in r.stderr
        # the nested block wins over a flat alias, which still loads with a notice
        cfg_path = _write_config(tmp, {"schema": 1, "peel_mode": "batch", "osd_order": 9,
                                       "decoder": {"mode": "single"}})
        r = run_cli(['decode', '--config', cfg_path, '--print-repro'])
        assert r.returncode == 0, r.stderr
        assert '--peel-mode=single' in r.stdout and '--osd-order=9' in r.stdout
        assert "'peel_mode' is deprecated; use decoder.mode" in r.stderr
        r = run_cli(['decode', '--config', _write_config(tmp, {"schema": 1, "decoder": {"mode": "zigzag"}}),
                     '--print-repro'])
        assert r.returncode == 16 and 'decoder/mode' in r.stdout
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
