import json
import os
import shutil
import tempfile
import textwrap
import unittest

import numpy as np

from parabolic.errors import DataError, ParseError, SchemaError, Unsupported
from parabolic.instance_io import (
    NATIVE_JSON,
    QPLIB,
    detect_format,
    parse_instance,
    serialize_instance,
    write_instance,
)
from parabolic.qcqp import QcqpInstance, eval_q, random_instance
from parabolic.sequential import lower_bound

MINIMAL = """
{
  "schema_version": 1,
  "n": 1,
  "m": 1,
  "objective": {"A": [[0, 0, 1.0]], "B": [[0.0]], "c": 0.0},
  "inequalities": [{"A": [], "B": [[-0.5]], "c": 1.0}]
}
"""

TINY_QPLIB = textwrap.dedent(
    """
    # small continuous QCQP
    tiny_qcqp
    QCQ
    minimize
    2   # variables
    2   # constraints
    2   # quadratic objective terms
    1 1 2.0
    2 2 2.0
    0.0  # default linear coefficient
    1
    1 -1.0
    0.5  # objective constant
    3   # quadratic constraint terms
    1 1 1 2.0
    1 2 2 2.0
    2 2 1 1.0
    1   # linear constraint terms
    2 1 1.0
    1.0e30
    -1.0e30   # default constraint lower bound
    1
    1 1.0
    1.0  # default constraint upper bound
    1
    2 0.5
    -2.0
    0
    2.0
    1
    2 1.0e30
    """
)


def _forms_equal(a, b):
    return (
        np.array_equal(a.dense_A(), b.dense_A())
        and np.array_equal(a.dense_B(), b.dense_B())
        and a.c == b.c
    )


class NativeJsonTests(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _write(self, name, text):
        path = os.path.join(self.tmpdir, name)
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_minimal_document(self):
        inst = parse_instance(self._write("square.json", MINIMAL))
        self.assertEqual(inst.name, "square")
        self.assertEqual((inst.n, inst.m), (1, 1))
        self.assertEqual(len(inst.inequalities), 1)
        self.assertAlmostEqual(lower_bound(inst).lower_bound, 1.0, places=6)

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(12)
        for index in range(100):
            inst = random_instance(rng, 4, m=1 + index % 2, n_eq=index % 3, n_ineq=2)
            inst.name = "random-%d" % index
            again = parse_instance(serialize_instance(inst).encode("utf-8"))
            self.assertEqual(again.name, inst.name)
            self.assertTrue(_forms_equal(again.objective, inst.objective))
            for a, b in zip(again.forms(), inst.forms()):
                self.assertTrue(_forms_equal(a, b))
            if inst.bounds is None:
                self.assertIsNone(again.bounds)
            else:
                np.testing.assert_array_equal(again.bounds[0], inst.bounds[0])
                np.testing.assert_array_equal(again.bounds[1], inst.bounds[1])

    def test_infinite_bounds_are_null(self):
        from parabolic.qcqp import QuadForm

        inst = QcqpInstance(QuadForm(np.eye(2)), bounds=([0.0, -np.inf], [np.inf, 1.0]))
        path = os.path.join(self.tmpdir, "bounded.json")
        write_instance(inst, path)
        with open(path) as handle:
            document = json.load(handle)
        self.assertEqual(document["bounds"], {"lower": [0.0, None], "upper": [None, 1.0]})
        again = parse_instance(path)
        self.assertEqual(again.bounds[1][0], np.inf)

    def test_malformed_json_reports_position(self):
        with self.assertRaises(ParseError) as context:
            parse_instance(b'{\n  "n": 1,\n  "m": }')
        self.assertEqual(context.exception.position, (3, 8))
        self.assertIn("line 3", context.exception.message)

    def test_schema_errors(self):
        broken = [
            MINIMAL.replace('"schema_version": 1', '"schema_version": 2'),
            MINIMAL.replace('"n": 1', '"n": 0'),
            MINIMAL.replace('[[0, 0, 1.0]]', '[[0, 0, 1.0], [0, 0, 2.0]]'),
            MINIMAL.replace('[[0, 0, 1.0]]', '[[0, 1, 1.0]]'),
            MINIMAL.replace('"c": 1.0', '"c": 1.0, "d": 2.0'),
            MINIMAL.replace('"B": [[0.0]]', '"B": [[0.0, 1.0]]'),
        ]
        for text in broken:
            with self.assertRaises(SchemaError):
                parse_instance(text.encode("utf-8"))

    def test_missing_file(self):
        with self.assertRaises(DataError):
            parse_instance(os.path.join(self.tmpdir, "absent.json"))

    def test_format_detection(self):
        self.assertEqual(detect_format("a/b.json"), NATIVE_JSON)
        self.assertEqual(detect_format("a/b.qplib"), QPLIB)
        self.assertEqual(detect_format(b"  {}"), NATIVE_JSON)
        with self.assertRaises(DataError):
            detect_format("a/b.lp")


class QplibTests(unittest.TestCase):
    def test_continuous_instance(self):
        inst = parse_instance(TINY_QPLIB.encode("utf-8"), QPLIB)
        self.assertEqual(inst.name, "tiny_qcqp")
        self.assertEqual((len(inst.equalities), len(inst.inequalities)), (1, 1))
        point = np.array([1.0, 0.0])
        self.assertAlmostEqual(eval_q(inst.objective, point), 0.5)
        self.assertAlmostEqual(eval_q(inst.equalities[0], point), 0.0)
        self.assertAlmostEqual(eval_q(inst.inequalities[0], point), 0.5)
        self.assertAlmostEqual(eval_q(inst.inequalities[0], [0.5, 0.5]), 0.25)
        lower, upper = inst.bounds
        np.testing.assert_array_equal(lower, [-2.0, -2.0])
        np.testing.assert_array_equal(upper, [2.0, np.inf])

    def test_maximize_negates_the_objective(self):
        inst = parse_instance(TINY_QPLIB.replace("minimize", "maximize").encode("utf-8"), QPLIB)
        self.assertAlmostEqual(eval_q(inst.objective, [1.0, 0.0]), -0.5)

    def test_two_sided_constraint_becomes_two_inequalities(self):
        text = TINY_QPLIB.replace(
            "-1.0e30   # default constraint lower bound", "-3.0   # default constraint lower bound"
        )
        inst = parse_instance(text.encode("utf-8"), QPLIB)
        self.assertEqual(len(inst.inequalities), 2)
        self.assertAlmostEqual(eval_q(inst.inequalities[1], [1.0, 0.0]), -4.0)

    def test_integer_variables_are_unsupported(self):
        with self.assertRaises(Unsupported) as context:
            parse_instance(TINY_QPLIB.replace("QCQ", "QBQ").encode("utf-8"), QPLIB)
        self.assertIn("integrality", context.exception.message)

    def test_bad_number_reports_position(self):
        text = TINY_QPLIB.replace("2   # variables", "two # variables")
        with self.assertRaises(ParseError) as context:
            parse_instance(text.encode("utf-8"), QPLIB)
        self.assertEqual(context.exception.position, (6, 1))

    def test_truncated_file(self):
        with self.assertRaises(ParseError):
            parse_instance(TINY_QPLIB.split("1.0e30")[0].encode("utf-8"), QPLIB)


@unittest.skipUnless(os.environ.get("PARABOLIC_QPLIB_DIR"), "PARABOLIC_QPLIB_DIR is not set")
class QplibLibraryTests(unittest.TestCase):
    def test_continuous_library_instances_parse(self):
        directory = os.environ["PARABOLIC_QPLIB_DIR"]
        for name in ("QPLIB_0911.qplib", "QPLIB_1157.qplib"):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                continue
            inst = parse_instance(path)
            self.assertGreater(inst.n, 0)
            self.assertEqual(inst.m, 1)


if __name__ == "__main__":
    unittest.main()
