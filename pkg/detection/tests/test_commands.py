import io
import json
import os
import shutil
import tempfile

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from detection import families
from detection.exceptions import handle_command_exception
from detection.families import Dataset, Family
from detection.numstat import RngStream
from detection.simharness import make_parameter_pair

CALIBRATE_CONF = """\
family = linear
d = 10
n = 40
n_prime = 40
sigma2 = 1
rho = 1
alpha = 0.1
method = chi2
trials = 1000
seed = 5
"""

LOGISTIC_CALIBRATE_CONF = """\
family = logistic
d = 3
n = 60
n_prime = 60
alpha = 0.1
method = chi2
trials = 300
seed = 9
"""

SIMULATE_CONF = """\
family = linear
d = 3
n = 20
n_prime = 20
alpha = 0.1
tests = edt_mc, edt_chi2, glrt
grid = 0
trials = 300
trials_per_point = 200
seed = 13
"""


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def write(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as handle:
            handle.write(text)
        return self.path(name)

    def run_command(self, *args, **options):
        out, err = io.StringIO(), io.StringIO()
        call_command(*args, stdout=out, stderr=err, **options)
        return out.getvalue(), err.getvalue()

    def output_value(self, output, key):
        for line in output.splitlines():
            if line.startswith(f"{key}: "):
                return line.split(": ", 1)[1]
        self.fail(f"{key!r} not found in output:\n{output}")


class FitCommandTest(CommandTestCase):
    def test_interpolating_design(self):
        path = self.write("interp.csv", "y,x1,x2\n3,1,0\n-1,0,1\n")
        out, _ = self.run_command("fit", path, family="linear")
        self.assertEqual(self.output_value(out, "theta_hat"), "[3, -1]")
        self.assertEqual(self.output_value(out, "n"), "2")
        self.assertEqual(self.output_value(out, "d"), "2")

    def test_logistic_symmetric_file(self):
        path = self.write("sym.csv", "y,x1,x2\n1,0.5,1\n-1,0.5,1\n1,-2,0.25\n-1,-2,0.25\n")
        out, _ = self.run_command("fit", path, family="logistic")
        self.assertEqual(self.output_value(out, "theta_hat"), "[0, 0]")

    def test_malformed_row(self):
        path = self.write("bad.csv", "y,x1\n1,2\n2,two\n")
        with self.assertRaises(CommandError) as ctx:
            self.run_command("fit", path, family="linear")
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn(":3:", str(ctx.exception))

    def test_separable_logistic_data(self):
        path = self.write("sep.csv", "y,x1\n1,1\n1,2\n-1,-1\n-1,-2\n")
        with self.assertRaises(CommandError) as ctx:
            self.run_command("fit", path, family="logistic")
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertIn("Separation", str(ctx.exception))


class DetectCommandTest(CommandTestCase):
    def write_dataset(self, name, data):
        data.to_csv(self.path(name))
        return self.path(name)

    def test_identical_datasets(self):
        data = families.generate_dataset(RngStream(1), Family.LINEAR, np.array([1.0, -1.0, 0.5]), 40)
        pre = self.write_dataset("pre.csv", data)
        post = self.path("post.csv")
        shutil.copyfile(pre, post)
        out, _ = self.run_command("detect", pre, post, family="linear", alpha=0.1, method="chi2")
        self.assertEqual(float(self.output_value(out, "statistic")), 0.0)
        self.assertEqual(self.output_value(out, "decision"), "not raised")
        self.assertEqual(self.output_value(out, "method"), "edt_chi2_approx")

    def test_large_change_is_detected(self):
        theta, theta_prime = make_parameter_pair(RngStream(3), Family.LINEAR, 10, 3.0, 1.0)
        pre = self.write_dataset("pre.csv", families.generate_dataset(RngStream(4), Family.LINEAR, theta, 40))
        post = self.write_dataset("post.csv", families.generate_dataset(RngStream(5), Family.LINEAR, theta_prime, 40))
        out, _ = self.run_command("detect", pre, post, family="linear", rho=1.0, alpha=0.1, method="chi2")
        self.assertEqual(self.output_value(out, "decision"), "raised")

    def test_monte_carlo_threshold_replays(self):
        data = families.generate_dataset(RngStream(6), Family.LINEAR, np.zeros(2), 30)
        other = families.generate_dataset(RngStream(7), Family.LINEAR, np.array([0.4, 0.0]), 30)
        pre, post = self.write_dataset("pre.csv", data), self.write_dataset("post.csv", other)
        first, _ = self.run_command("detect", pre, post, method="mc", trials=200, seed=3)
        second, _ = self.run_command("detect", pre, post, method="mc", trials=200, seed=3)
        self.assertEqual(first, second)
        self.assertEqual(self.output_value(first, "method"), "edt_monte_carlo")

    def test_dimension_mismatch(self):
        pre = self.write("pre.csv", "y,x1,x2\n1,0,1\n2,1,0\n3,1,1\n")
        post = self.write("post.csv", "y,x1\n1,1\n2,2\n")
        with self.assertRaises(CommandError) as ctx:
            self.run_command("detect", pre, post)
        self.assertEqual(ctx.exception.returncode, 2)


class CalibrateCommandTest(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.config = self.write("calibrate.conf", CALIBRATE_CONF)

    def test_chi2_is_deterministic(self):
        first, _ = self.run_command("calibrate", config=self.config)
        second, _ = self.run_command("calibrate", config=self.config)
        self.assertEqual(first, second)
        self.assertEqual(self.output_value(first, "method"), "chi2_approx")

    def test_monte_carlo_replays(self):
        first, _ = self.run_command("calibrate", config=self.config, method="mc", trials=200)
        second, _ = self.run_command("calibrate", config=self.config, method="mc", trials=200)
        self.assertEqual(first, second)

    def test_chi2_not_below_monte_carlo(self):
        chi2, _ = self.run_command("calibrate", config=self.config)
        mc, _ = self.run_command("calibrate", config=self.config, method="mc")
        self.assertGreaterEqual(float(self.output_value(chi2, "eta")), 0.95 * float(self.output_value(mc, "eta")))

    def test_log_rows_are_appended(self):
        log = self.path("calibration.csv")
        self.run_command("calibrate", config=self.config, out=log)
        self.run_command("calibrate", config=self.config, out=log, method="mc", trials=200)
        with open(log, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[0].startswith("method,family,d,n,n_prime,alpha,rho,eta"))
        self.assertTrue(lines[1].startswith("chi2,linear,10,40,40,"))
        self.assertTrue(lines[2].startswith("mc,linear,10,40,40,"))


    def test_plugin_covariance_has_no_single_threshold(self):
        config = self.write("plugin.conf", CALIBRATE_CONF + "covariance = plugin\n")
        with self.assertRaises(CommandError) as ctx:
            self.run_command("calibrate", config=config)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_simulated_covariance_logs_trials(self):
        config = self.write("logistic.conf", LOGISTIC_CALIBRATE_CONF)
        log = self.path("calibration.csv")
        out, _ = self.run_command("calibrate", config=config, out=log)
        self.assertEqual(self.output_value(out, "method"), "chi2_approx")
        with open(log, encoding="utf-8") as handle:
            header, row = [line.split(",") for line in handle.read().splitlines()]
        values = dict(zip(header, row))
        self.assertEqual(values["trials"], "300")
        self.assertGreaterEqual(float(values["noncentrality"]), float(values["rho"]) ** 2 / float(values["lambda_min"]))

    def test_monte_carlo_matches_simulate_threshold(self):
        config = self.write("simulate.conf", SIMULATE_CONF)
        out, _ = self.run_command("calibrate", config=config, method="mc")
        curve_path = self.path("curve.csv")
        self.run_command("simulate", config=config, out=curve_path)
        with open(curve_path, encoding="utf-8") as handle:
            meta = [line for line in handle.read().splitlines() if line.startswith("# thresholds: ")][0]
        thresholds = json.loads(meta[len("# thresholds: "):])
        self.assertEqual(float(self.output_value(out, "eta")), thresholds["edt_mc"])

    def test_missing_required_key(self):
        config = self.write("partial.conf", "family = linear\nd = 3\n")
        with self.assertRaises(CommandError) as ctx:
            self.run_command("calibrate", config=config)
        self.assertEqual(ctx.exception.returncode, 2)


class SimulateCommandTest(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.config = self.write("simulate.conf", SIMULATE_CONF)

    def read(self, path):
        with open(path, encoding="utf-8") as handle:
            return handle.read()

    def test_single_grid_point(self):
        out_path = self.path("curve.csv")
        out, _ = self.run_command("simulate", config=self.config, out=out_path)
        lines = [line for line in self.read(out_path).splitlines() if not line.startswith("#")]
        self.assertEqual(lines[0], "normalized_change,test,p_raise,std_err,threshold")
        self.assertEqual(len(lines), 4)
        self.assertEqual(len(out.splitlines()), 3)

    def test_byte_identical_replay(self):
        first, second = self.path("a.csv"), self.path("b.csv")
        self.run_command("simulate", config=self.config, out=first)
        with override_settings(MODELSHIFT_WORKERS=4):
            self.run_command("simulate", config=self.config, out=second)
        self.assertEqual(self.read(first), self.read(second))

    def test_unwritable_output(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("simulate", config=self.config, out=self.path("missing/dir/curve.csv"))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_out_is_required(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command("simulate", config=self.config)
        self.assertEqual(ctx.exception.returncode, 2)


class ExitCodeTest(SimpleTestCase):
    def test_linear_algebra_failure_is_numerical(self):
        error = handle_command_exception(np.linalg.LinAlgError("Singular matrix"))
        self.assertEqual(error.returncode, 3)
        self.assertIn("LinAlgError", str(error))

    def test_value_error_is_input(self):
        self.assertEqual(handle_command_exception(ValueError("bad value")).returncode, 2)

    def test_os_error_is_input(self):
        self.assertEqual(handle_command_exception(FileNotFoundError(2, "missing")).returncode, 2)
