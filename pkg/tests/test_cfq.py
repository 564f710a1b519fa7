import pytest

from iterdec.cfq import (
    CfqError,
    CfqExample,
    decompose,
    expand_iterative,
    fixture_examples,
    load_cfq,
    load_split_indices,
    normalize_query,
    reassemble,
)
from iterdec.data import save_pairs
from iterdec.vocab import EOI, SEP2, detokenize, tokenize


class TestDecompose:
    def test_single_clause(self):
        dec = decompose(tokenize("SELECT count(*) WHERE { M0 a ns:film.director }"))
        assert dec.header == tokenize("SELECT count(*) WHERE {")
        assert dec.clauses == [tokenize("M0 a ns:film.director")]
        assert dec.footer == ["}"]

    def test_clauses_sorted(self):
        dec = decompose(tokenize("SELECT count(*) WHERE { ?x p M1 . ?x a M0 }"))
        assert dec.clauses == [tokenize("?x a M0"), tokenize("?x p M1")]

    def test_sorting_is_fixed_point(self):
        for ex in fixture_examples():
            once = decompose(ex.query)
            twice = decompose(once.to_tokens())
            assert once.clauses == twice.clauses

    def test_filter_group_stays_atomic(self):
        q = tokenize("SELECT count(*) WHERE { M0 p ?x . FILTER ( ?x != M0 ) }")
        dec = decompose(q)
        assert tokenize("FILTER ( ?x != M0 )") in dec.clauses
        assert len(dec.clauses) == 2

    def test_matches_recursive_descent_reference(self):
        # independent splitter: group tokens by recursion over parens
        def reference_split(body):
            clauses, cur, stack = [], [], []
            for tok in body:
                if tok == "(":
                    stack.append(tok)
                if tok == ")":
                    stack.pop()
                if tok == "." and not stack:
                    clauses.append(cur)
                    cur = []
                else:
                    cur.append(tok)
            if cur:
                clauses.append(cur)
            return sorted(clauses, key=detokenize)

        for ex in fixture_examples():
            body = list(ex.query[ex.query.index("{") + 1:ex.query.index("}")])
            assert decompose(ex.query).clauses == reference_split(body)

    @pytest.mark.parametrize(
        "bad",
        [
            "SELECT count(*) WHERE M0 p M1 }",
            "SELECT count(*) WHERE { M0 p M1",
            "SELECT count(*) WHERE { M0 p ( M1 }",
            "SELECT count(*) WHERE { } trailing",
            "SELECT count(*) WHERE { M0 p M1 . }",
        ],
    )
    def test_malformed(self, bad):
        with pytest.raises(CfqError):
            decompose(tokenize(bad))


class TestExpand:
    def test_single_clause_three_steps(self):
        ex = CfqExample.from_text("Who directed M0", "SELECT DISTINCT ?x0 WHERE { ?x0 p M0 }")
        it = expand_iterative(ex)
        assert len(it) == 3
        assert it.steps[0] == (tokenize("Who directed M0"), tokenize("SELECT DISTINCT ?x0 WHERE {"))
        assert it.steps[1][0] == tokenize("Who directed M0 [SEP2] SELECT DISTINCT ?x0 WHERE {")
        assert it.steps[1][1] == tokenize("?x0 p M0")
        assert it.steps[2][1] == ["}", EOI]

    def test_three_clause_fixture(self):
        ex = CfqExample.from_text(
            "Did a male director direct M0",
            "SELECT count(*) WHERE { ?x0 a D . ?x0 d M0 . ?x0 g ns:m.05zppz }",
        )
        it = expand_iterative(ex)
        assert len(it) == 5
        assert reassemble(it.outputs) == normalize_query(ex.query)

    def test_empty_body_two_steps(self):
        ex = CfqExample.from_text("Did anything happen", "SELECT count(*) WHERE { }")
        it = expand_iterative(ex)
        assert len(it) == 2
        assert it.steps[1][1] == ["}", EOI]

    def test_long_input_monotonicity(self):
        for ex in fixture_examples():
            lengths = [len(inp) for inp, _ in expand_iterative(ex).steps]
            assert lengths == sorted(lengths)
            assert len(set(lengths)) == len(lengths)

    def test_round_trip_all_fixtures(self):
        for ex in fixture_examples():
            it = expand_iterative(ex)
            it.validate()
            assert reassemble(it.outputs) == normalize_query(ex.query)
            # fixtures store their clauses pre-sorted, so normalization is a no-op
            assert normalize_query(ex.query) == list(ex.query)

    def test_single_sep2_per_input(self):
        for ex in fixture_examples():
            for inp, _ in expand_iterative(ex).steps[1:]:
                assert inp.count(SEP2) == 1


class TestReassemble:
    def test_header_footer_only(self):
        outs = [tokenize("SELECT count(*) WHERE {"), ["}", EOI]]
        assert reassemble(outs) == tokenize("SELECT count(*) WHERE { }")

    def test_missing_terminator(self):
        with pytest.raises(CfqError, match="unterminated"):
            reassemble([tokenize("SELECT count(*) WHERE {"), ["}"]])


class TestLoaders:
    def test_select_by_indices(self, tmp_path):
        path = tmp_path / "cfq.tsv"
        examples = fixture_examples()[:3]
        save_pairs(path, [(list(e.question), list(e.query)) for e in examples])
        got = load_cfq(path, [0, 2])
        assert got == [examples[0], examples[2]]

    def test_index_out_of_range(self, tmp_path):
        path = tmp_path / "cfq.tsv"
        save_pairs(path, [(["q"], tokenize("SELECT count(*) WHERE { }"))])
        with pytest.raises(CfqError, match="7"):
            load_cfq(path, [7])

    def test_split_file(self, tmp_path):
        path = tmp_path / "split.txt"
        path.write_text("train\n0\n2\ntest\n1\n")
        assert load_split_indices(path) == {"train": [0, 2], "test": [1]}

    def test_split_file_errors(self, tmp_path):
        path = tmp_path / "split.txt"
        path.write_text("0\n")
        with pytest.raises(CfqError, match=":1"):
            load_split_indices(path)
        path.write_text("train\nxyz\n")
        with pytest.raises(CfqError, match=":2"):
            load_split_indices(path)


def test_fixture_pool_size_and_validity():
    examples = fixture_examples()
    assert len(examples) >= 50
    assert len({(e.question, e.query) for e in examples}) == len(examples)
