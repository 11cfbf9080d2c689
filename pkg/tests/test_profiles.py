import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bow_embedding, cosine

from arquest.errors import EmptyInput, InvalidProfile, SchemaError
from arquest.kb import AnswerChoice, Category, RiskFactor
from arquest.profiles import (
    EMBEDDING_DIM,
    EvidenceSnippet,
    ExternalSource,
    Gender,
    PersonalDetails,
    SourceKind,
    UserProfile,
    build_profile,
    embed,
    retrieve_evidence,
    snippetize,
    validate_details,
)


def details(**overrides):
    base = dict(age=44, gender=Gender.FEMALE, municipality="Braga", occupation="teacher")
    base.update(overrides)
    return PersonalDetails(**base)


def ehr_source(conditions=(), medications=(), procedures=(), extra=None):
    payload = {
        "conditions": [{"name": n, "onset_date": d} for n, d in conditions],
        "medications": [{"name": n, "start_date": d} for n, d in medications],
        "procedures": [{"name": n, "date": d} for n, d in procedures],
    }
    if extra:
        payload.update(extra)
    return ExternalSource(kind=SourceKind.HEALTH_RECORDS, payload=payload)


def make_factor(fid="f1", name="Family Diabetes", summary="Type 2 diabetes in parents or siblings."):
    return RiskFactor(
        id=fid,
        category=Category.FAMILY_HISTORY,
        name=name,
        summary=summary,
        question_text="?",
        choices=(AnswerChoice("no", 0), AnswerChoice("yes", 2)),
    )


class TestSnippetize:
    def test_ehr_counts(self):
        source = ehr_source(
            conditions=[("type 2 diabetes", "2019-03-02"), ("asthma", "2005-11-30")],
            medications=[("metformin", "2019-03-10")],
        )
        snippets = snippetize(source)
        assert len(snippets) == 3
        assert snippets[0].text == "condition: type 2 diabetes (2019-03-02)"
        assert snippets[2].text == "medication: metformin (2019-03-10)"

    def test_encounters_ignored(self):
        source = ehr_source(
            conditions=[("asthma", "2005-11-30")],
            extra={"encounters": [{"name": "checkup", "date": "2020-01-01"}]},
        )
        assert len(snippetize(source)) == 1

    def test_fitness_band_sedentary(self):
        source = ExternalSource(
            kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": [3800, 3800, 3800]}
        )
        [snippet] = snippetize(source)
        assert snippet.text == "average daily steps: 3800 (sedentary)"

    @pytest.mark.parametrize(
        "average,band",
        [
            (4999, "sedentary"),
            (5000, "low-active"),
            (7499, "low-active"),
            (7500, "somewhat-active"),
            (9999, "somewhat-active"),
            (10000, "active"),
        ],
    )
    def test_fitness_band_edges(self, average, band):
        source = ExternalSource(
            kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": [average]}
        )
        [snippet] = snippetize(source)
        assert snippet.text == f"average daily steps: {average} ({band})"

    def test_social_caption_verbatim(self):
        text = "a man riding a motorcycle on a dirt road"
        source = ExternalSource(
            kind=SourceKind.SOCIAL_POSTS,
            payload={"captions": [{"text": text, "date": "2021-06-01"}]},
        )
        [snippet] = snippetize(source)
        assert snippet.text == text
        assert snippet.date == "2021-06-01"

    def test_social_provenance_settings_ignored(self):
        source = ExternalSource(
            kind=SourceKind.SOCIAL_POSTS,
            payload={
                "captions": [{"text": "beach day", "date": None}],
                "caption_temperature": 0.3,
                "caption_top_p": 0.9,
            },
        )
        assert len(snippetize(source)) == 1

    def test_missing_field(self):
        source = ExternalSource(kind=SourceKind.HEALTH_RECORDS, payload={"conditions": []})
        with pytest.raises(SchemaError):
            snippetize(source)

    def test_empty_name(self):
        source = ehr_source(conditions=[("", "2020-01-01")])
        with pytest.raises(SchemaError):
            snippetize(source)

    def test_empty_step_series(self):
        source = ExternalSource(kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": []})
        with pytest.raises(SchemaError):
            snippetize(source)

    def test_negative_steps(self):
        source = ExternalSource(kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": [-1]})
        with pytest.raises(SchemaError):
            snippetize(source)

    def test_overlong_caption(self):
        source = ExternalSource(
            kind=SourceKind.SOCIAL_POSTS, payload={"captions": [{"text": "x" * 301}]}
        )
        with pytest.raises(SchemaError):
            snippetize(source)

    @given(
        st.integers(0, 5),
        st.integers(0, 5),
        st.integers(0, 5),
        st.integers(0, 4),
        st.booleans(),
    )
    def test_counting_invariant(self, n_cond, n_med, n_proc, n_capt, fitness):
        sources = [
            ehr_source(
                conditions=[(f"c{i}", "2020-01-01") for i in range(n_cond)],
                medications=[(f"m{i}", "2020-01-01") for i in range(n_med)],
                procedures=[(f"p{i}", "2020-01-01") for i in range(n_proc)],
            ),
            ExternalSource(
                kind=SourceKind.SOCIAL_POSTS,
                payload={"captions": [{"text": f"cap {i}"} for i in range(n_capt)]},
            ),
        ]
        if fitness:
            sources.append(
                ExternalSource(kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": [6000]})
            )
        profile = build_profile(details(), sources)
        expected = n_cond + n_med + n_proc + n_capt + (1 if fitness else 0)
        assert len(profile.snippets) == expected


class TestEmbed:
    def test_deterministic(self):
        a = embed("type 2 diabetes diagnosis")
        b = embed("type 2 diabetes diagnosis")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        for text in ("hello", "a b c d e", "numbers 123 456"):
            assert abs(np.linalg.norm(embed(text)) - 1.0) < 1e-9

    def test_dimension(self):
        assert embed("x").shape == (EMBEDDING_DIM,)

    def test_matches_oracle(self):
        for text in ("diabetes diagnosis", "a man riding a motorcycle", "steps 3800"):
            assert np.allclose(embed(text), np.array(bow_embedding(text)))

    def test_related_text_closer_than_unrelated(self):
        query = embed("diabetes diagnosis")
        related = float(np.dot(query, embed("diabetes diagnosis today")))
        unrelated = float(np.dot(query, embed("mountain climbing trip")))
        # and the same ordering out of the independent implementation
        o_query = bow_embedding("diabetes diagnosis")
        o_related = cosine(o_query, bow_embedding("diabetes diagnosis today"))
        o_unrelated = cosine(o_query, bow_embedding("mountain climbing trip"))
        assert related > unrelated
        assert o_related > o_unrelated
        assert related == pytest.approx(o_related)
        assert unrelated == pytest.approx(o_unrelated)

    def test_tokenless_text(self):
        with pytest.raises(EmptyInput):
            embed("!!! ???")


class TestRetrieve:
    def profile_with(self, texts):
        snippets = tuple(
            EvidenceSnippet(id=f"s-{i:03d}", text=t, provenance=(SourceKind.SOCIAL_POSTS, f"captions[{i}]"))
            for i, t in enumerate(texts)
        )
        return UserProfile(details=details(), snippets=snippets, shared_kinds=frozenset())

    def test_empty_profile(self):
        bundle = retrieve_evidence(self.profile_with([]), make_factor())
        assert bundle.hits == ()

    def test_identical_text_ranks_first_with_similarity_one(self):
        factor = make_factor()
        query_text = factor.name + " " + factor.summary
        profile = self.profile_with(["something about hiking", query_text])
        bundle = retrieve_evidence(profile, factor)
        assert bundle.hits[0][0] == "s-001"
        assert bundle.hits[0][1] == pytest.approx(1.0)

    def test_twenty_snippets_match_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        vocabulary = (
            "diabetes insulin running hiking beach sunset smoking tobacco wine "
            "asthma metformin steps gym coffee mountain surgery clinic family "
            "heart cholesterol"
        ).split()
        texts = [
            " ".join(rng.choice(vocabulary, size=rng.integers(3, 8)))
            for _ in range(20)
        ]
        factor = make_factor(summary="Type 2 diabetes or insulin treated relatives.")
        profile = self.profile_with(texts)
        bundle = retrieve_evidence(profile, factor, m=5)

        query = bow_embedding(factor.name + " " + factor.summary)
        ranked = sorted(
            (
                (f"s-{i:03d}", cosine(query, bow_embedding(t)))
                for i, t in enumerate(texts)
            ),
            key=lambda hit: (-hit[1], hit[0]),
        )[:5]
        assert [h[0] for h in bundle.hits] == [h[0] for h in ranked]
        for got, want in zip(bundle.hits, ranked):
            assert got[1] == pytest.approx(want[1])

    def test_hits_capped_at_m(self):
        profile = self.profile_with([f"diabetes note {i}" for i in range(8)])
        bundle = retrieve_evidence(profile, make_factor(), m=3)
        assert len(bundle.hits) == 3

    def test_scores_descending_ties_by_id(self):
        profile = self.profile_with(["diabetes", "diabetes", "diabetes"])
        bundle = retrieve_evidence(profile, make_factor(), m=5)
        scores = [s for _, s in bundle.hits]
        assert scores == sorted(scores, reverse=True)
        assert [h[0] for h in bundle.hits] == ["s-000", "s-001", "s-002"]

    def test_permutation_invariance(self):
        texts = ["diabetes checkup", "beach day", "insulin pump", "marathon training"]
        factor = make_factor()
        forward = retrieve_evidence(self.profile_with(texts), factor)
        reversed_profile = self.profile_with(list(reversed(texts)))
        # rebuild ids so the same text keeps the same id under permutation
        snippets = tuple(
            EvidenceSnippet(
                id=f"s-{texts.index(t.text):03d}",
                text=t.text,
                provenance=t.provenance,
            )
            for t in reversed_profile.snippets
        )
        permuted = UserProfile(details=details(), snippets=snippets, shared_kinds=frozenset())
        backward = retrieve_evidence(permuted, factor)
        assert forward.hits == backward.hits

    def test_bad_width(self):
        with pytest.raises(EmptyInput):
            retrieve_evidence(self.profile_with(["x"]), make_factor(), m=0)


class TestProfileBuild:
    def test_duplicate_kind_rejected(self):
        sources = [
            ExternalSource(kind=SourceKind.SOCIAL_POSTS, payload={"captions": [{"text": "a"}]}),
            ExternalSource(kind=SourceKind.SOCIAL_POSTS, payload={"captions": [{"text": "b"}]}),
        ]
        with pytest.raises(SchemaError, match="twice"):
            build_profile(details(), sources)

    def test_shared_kinds_tracked(self):
        sources = [
            ExternalSource(kind=SourceKind.FITNESS_TRACKER, payload={"daily_steps": [8000]}),
        ]
        profile = build_profile(details(), sources)
        assert profile.shared_kinds == frozenset({SourceKind.FITNESS_TRACKER})

    def test_snippet_ids_unique(self):
        sources = [
            ehr_source(
                conditions=[("a", "2020-01-01"), ("b", "2020-01-02")],
                medications=[("c", "2020-01-03")],
            ),
            ExternalSource(
                kind=SourceKind.SOCIAL_POSTS,
                payload={"captions": [{"text": "x"}, {"text": "y"}]},
            ),
        ]
        profile = build_profile(details(), sources)
        ids = [s.id for s in profile.snippets]
        assert len(set(ids)) == len(ids)

    def test_age_out_of_range(self):
        with pytest.raises(InvalidProfile):
            validate_details(details(age=17))
        with pytest.raises(InvalidProfile):
            validate_details(details(age=101))

    def test_blank_municipality(self):
        with pytest.raises(InvalidProfile):
            validate_details(details(municipality="  "))
