import os, sys, json, tempfile, shutil, subprocess, unittest

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
if BASE_DIR not in sys.path:
    sys.path.insert(0, BASE_DIR)

from verify_report import main as verify_main, recorded_hashes  # type: ignore


class TestRecordedHashes(unittest.TestCase):
    def test_single_hash(self):
        self.assertEqual(recorded_hashes({'dem_hash': 'abc'}), {'dem': 'abc'})

    def test_sweep_hashes_filtered_by_p(self):
        rep = {'dem_hash': None, 'dem_hashes': {'0.001': 'h1', '0.002': 'h2'}}
        self.assertEqual(recorded_hashes(rep), {'p=0.001': 'h1', 'p=0.002': 'h2'})
        self.assertEqual(recorded_hashes(rep, '0.002'), {'p=0.002': 'h2'})

    def test_empty(self):
        self.assertEqual(recorded_hashes({}), {})


class TestVerifyReport(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.mkdtemp(prefix='bbpeel_verify_')
        r = subprocess.run([sys.executable, os.path.join(BASE_DIR, 'bbpeel.py'), 'dem', '--code', 'kunlun-18',
                            '--rounds', '2', '--shots', '50', '--out', self.tempdir, '--report', 'json'],
                           capture_output=True, text=True)
        self.assertEqual(r.returncode, 0, r.stderr)
        self.report = os.path.join(self.tempdir, 'bbpeel_report.json')
        self.dem = os.path.join(self.tempdir, 'dem.dem')

    def tearDown(self):
        shutil.rmtree(self.tempdir, ignore_errors=True)

    def test_pass(self):
        self.assertEqual(verify_main(['--report', self.report, '--dem', self.dem]), 0)

    def test_fail_mismatch(self):
        with open(self.dem, 'a', encoding='utf-8') as f:
            f.write('error(0.01) D0\n')
        self.assertEqual(verify_main(['--report', self.report, '--dem', self.dem]), 3)

    def test_missing_inputs(self):
        self.assertEqual(verify_main(['--report', os.path.join(self.tempdir, 'nope.json'), '--dem', self.dem]), 2)
        blank = os.path.join(self.tempdir, 'blank.json')
        with open(blank, 'w', encoding='utf-8') as f:
            json.dump({'dem_hash': None}, f)
        self.assertEqual(verify_main(['--report', blank, '--dem', self.dem]), 2)

    def test_cli_output_line(self):
        r = subprocess.run([sys.executable, os.path.join(BASE_DIR, 'verify_report.py'), '--report', self.report,
                            '--dem', self.dem], capture_output=True, text=True)
        self.assertEqual(r.returncode, 0)
        self.assertIn('matched=dem', r.stdout)


if __name__ == '__main__':
    unittest.main()
