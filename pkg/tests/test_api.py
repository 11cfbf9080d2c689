import json
import threading
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from arquest import api
from arquest.api import (
    ServiceConfig,
    create_app,
    load_service_config,
    parse_service_config,
    read_events,
    service_oracle,
)
from arquest.bundled import bundled_path
from arquest.errors import ConfigError, CorruptLog
from arquest.geo import (
    all_region_profiles,
    ingest_indicators,
    load_indicator_defs,
    region_profiles_to_json,
)
from arquest.kb import load_knowledge_base
from arquest.profiles import (
    EvidenceSnippet,
    Gender,
    PersonalDetails,
    SourceKind,
    UserProfile,
)

DETAILS = {
    "age": 44,
    "gender": "female",
    "municipality": "Braga",
    "occupation": "teacher",
}

EHR_PAYLOAD = {
    "conditions": [
        {"name": "type 2 diabetes mellitus", "date": "2019-03-10"},
        {"name": "tobacco smoking", "date": "2021-01-01"},
    ],
    "medications": [{"name": "metformin", "date": "2019-04-01"}],
    "procedures": [],
}


@pytest.fixture(scope="module")
def geo_file(tmp_path_factory):
    defs = load_indicator_defs(bundled_path("geo_defs.json"))
    table = ingest_indicators(bundled_path("municipalities.csv"), defs)
    doc = region_profiles_to_json(all_region_profiles(table))
    path = tmp_path_factory.mktemp("geo") / "profiles.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def config(tmp_path_factory, geo_file):
    return ServiceConfig(
        kb_path=Path(bundled_path("kb.json")),
        geo_path=geo_file,
        data_dir=tmp_path_factory.mktemp("sessions"),
    )


@pytest.fixture(scope="module")
def app(config):
    return create_app(config)


@pytest.fixture(scope="module")
def client(app):
    return TestClient(app, raise_server_exceptions=False)


@pytest.fixture(scope="module")
def kb():
    return load_knowledge_base(bundled_path("kb.json"))


def start(client, mode="Traditional", details=DETAILS):
    response = client.post(
        "/sessions", json={"mode": mode, "personal_details": details}
    )
    assert response.status_code == 201, response.text
    return response.json()["session_id"]


def link_ehr(client, sid):
    response = client.post(
        f"/sessions/{sid}/sources",
        json={"kind": "HealthRecords", "payload": EHR_PAYLOAD, "terms_accepted": True},
    )
    assert response.status_code == 200, response.text
    return response.json()


def drive_to_done(client, sid, choice=0):
    asked = []
    while True:
        body = client.post(f"/sessions/{sid}/next").json()
        if body.get("done"):
            return asked, body["reason"]
        fid = body["ask"]["factor_id"]
        asked.append(fid)
        answered = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": choice}
        )
        assert answered.status_code == 200, answered.text


def complete_dynamic(client, sid, corrections=0):
    """Forecast, review (correcting the first n cards), then drain questions."""
    link_ehr(client, sid)
    forecasted = client.post(f"/sessions/{sid}/forecast")
    assert forecasted.status_code == 200, forecasted.text
    cards = forecasted.json()["prefilled"]
    for index, card in enumerate(cards):
        if index < corrections:
            other = (card["predicted_index"] + 1) % len(card["choices"])
            body = {"factor_id": card["factor_id"], "decision": "correct", "choice_index": other}
        else:
            body = {"factor_id": card["factor_id"], "decision": "accept"}
        reviewed = client.post(f"/sessions/{sid}/review", json=body)
        assert reviewed.status_code == 200, reviewed.text
    asked, reason = drive_to_done(client, sid)
    return cards, asked, reason


class TestConfig:
    def test_defaults(self, geo_file):
        config = parse_service_config(
            {"kb_path": "kb.json", "geo_path": str(geo_file)}, base_dir="/srv"
        )
        assert config.kb_path == Path("/srv/kb.json")
        assert config.listen_port == 8600
        assert config.gateway == {"kind": "mock"}
        assert config.review_phase is True

    def test_listen_parsing(self, geo_file):
        config = parse_service_config(
            {"kb_path": "k", "geo_path": "g", "listen": "0.0.0.0:9001"}
        )
        assert (config.listen_host, config.listen_port) == ("0.0.0.0", 9001)

    def test_cap_must_be_positive(self):
        with pytest.raises(ConfigError, match=">= 1"):
            parse_service_config({"kb_path": "k", "geo_path": "g", "question_cap": 0})

    def test_unknown_gateway(self):
        with pytest.raises(ConfigError, match="gateway kind"):
            parse_service_config({"kb_path": "k", "geo_path": "g", "gateway": {"kind": "psychic"}})

    def test_remote_needs_endpoint(self):
        with pytest.raises(ConfigError, match="base_url"):
            parse_service_config({"kb_path": "k", "geo_path": "g", "gateway": {"kind": "remote"}})

    def test_load_resolves_relative_paths(self, tmp_path, geo_file):
        doc = {"kb_path": "kb.json", "geo_path": str(geo_file), "data_dir": "logs"}
        path = tmp_path / "service.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        config = load_service_config(path)
        assert config.kb_path == tmp_path / "kb.json"
        assert config.data_dir == tmp_path / "logs"


class TestSessionCreation:
    def test_created_with_opaque_id(self, client):
        sid = start(client)
        assert len(sid) == 32
        int(sid, 16)

    def test_unknown_mode(self, client):
        response = client.post(
            "/sessions", json={"mode": "Psychic", "personal_details": DETAILS}
        )
        assert response.status_code == 422
        assert "mode" in response.json()["detail"]

    def test_underage(self, client):
        response = client.post(
            "/sessions",
            json={"mode": "Traditional", "personal_details": {**DETAILS, "age": 17}},
        )
        assert response.status_code == 422

    def test_missing_details_field(self, client):
        response = client.post(
            "/sessions",
            json={"mode": "Traditional", "personal_details": {"age": 30}},
        )
        assert response.status_code == 422

    def test_shape_validation(self, client):
        response = client.post("/sessions", json={"personal_details": DETAILS})
        assert response.status_code == 422

    def test_unknown_session_is_404(self, client):
        assert client.get("/sessions/deadbeef").status_code == 404
        assert client.post("/sessions/deadbeef/next").status_code == 404


class TestTraditionalFlow:
    def test_thirty_questions_then_report(self, client, kb):
        sid = start(client)
        asked, reason = drive_to_done(client, sid)
        assert asked == list(kb.traditional_ids)
        assert reason == "questionnaire complete"
        report = client.post(f"/sessions/{sid}/finalize")
        assert report.status_code == 200
        body = report.json()
        assert body["session_id"] == sid
        assert body["normalized_score"] == pytest.approx(
            100.0 * body["raw_score"] / kb.max_possible_score()
        )
        assert body["trust_flag"] is False
        snapshot = client.get(f"/sessions/{sid}").json()
        assert snapshot["state"] == "Completed"
        assert snapshot["questions_answered"] == 30
        assert snapshot["finalized"] is True

    def test_finalize_is_repeatable(self, client):
        sid = start(client)
        drive_to_done(client, sid, choice=1)
        first = client.post(f"/sessions/{sid}/finalize")
        second = client.post(f"/sessions/{sid}/finalize")
        assert first.content == second.content

    def test_finalize_before_done(self, client):
        sid = start(client)
        assert client.post(f"/sessions/{sid}/finalize").status_code == 409

    def test_answer_before_ask(self, client):
        sid = start(client)
        response = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": "lh_smoking", "choice_index": 0}
        )
        assert response.status_code == 409

    def test_repeated_next_is_idempotent(self, client, config):
        sid = start(client)
        first = client.post(f"/sessions/{sid}/next").json()
        second = client.post(f"/sessions/{sid}/next").json()
        assert first == second
        events = read_events(config.data_dir / f"{sid}.jsonl")
        assert [e["kind"] for e in events] == ["Started", "Asked"]

    def test_out_of_turn_answer(self, client):
        sid = start(client)
        body = client.post(f"/sessions/{sid}/next").json()
        wrong = "fh_cancer" if body["ask"]["factor_id"] != "fh_cancer" else "fh_diabetes"
        response = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": wrong, "choice_index": 0}
        )
        assert response.status_code == 409

    def test_invalid_choice_index(self, client):
        sid = start(client)
        fid = client.post(f"/sessions/{sid}/next").json()["ask"]["factor_id"]
        response = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": 99}
        )
        assert response.status_code == 422


class TestSources:
    def test_link_reports_snippets(self, client):
        sid = start(client, mode="Dynamic")
        body = link_ehr(client, sid)
        assert body["shared_kinds"] == ["HealthRecords"]
        assert body["snippet_count"] == 3

    def test_terms_required(self, client):
        sid = start(client, mode="Dynamic")
        response = client.post(
            f"/sessions/{sid}/sources",
            json={"kind": "HealthRecords", "payload": EHR_PAYLOAD},
        )
        assert response.status_code == 422
        assert "terms" in response.json()["detail"]
        assert client.get(f"/sessions/{sid}").json()["snippet_count"] == 0

    def test_unknown_kind(self, client):
        sid = start(client, mode="Dynamic")
        response = client.post(
            f"/sessions/{sid}/sources",
            json={"kind": "Telepathy", "payload": {}, "terms_accepted": True},
        )
        assert response.status_code == 422

    def test_malformed_payload_leaves_profile_alone(self, client):
        sid = start(client, mode="Dynamic")
        response = client.post(
            f"/sessions/{sid}/sources",
            json={
                "kind": "SocialPosts",
                "payload": {"captions": ["bare string"]},
                "terms_accepted": True,
            },
        )
        assert response.status_code == 422
        assert client.get(f"/sessions/{sid}").json()["shared_kinds"] == []

    def test_linking_after_forecast_conflicts(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        assert client.post(f"/sessions/{sid}/forecast").status_code == 200
        response = client.post(
            f"/sessions/{sid}/sources",
            json={"kind": "FitnessTracker", "payload": {"daily_steps": [9000]},
                  "terms_accepted": True},
        )
        assert response.status_code == 409


class TestDynamicFlow:
    def test_forecast_prefills_evidence_backed_factors(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        cards = client.post(f"/sessions/{sid}/forecast").json()["prefilled"]
        ids = {card["factor_id"] for card in cards}
        assert {"fh_diabetes", "lh_smoking", "hs_chronic"} <= ids
        for card in cards:
            assert card["question"]
            assert len(card["choices"]) >= 2
            assert 0.0 < card["confidence"] <= 0.95
            assert card["review"] == "Pending"

    def test_forecast_twice_conflicts(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        assert client.post(f"/sessions/{sid}/forecast").status_code == 200
        assert client.post(f"/sessions/{sid}/forecast").status_code == 409

    def test_forecast_on_traditional_conflicts(self, client):
        sid = start(client)
        assert client.post(f"/sessions/{sid}/forecast").status_code == 409

    def test_review_unknown_factor(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        client.post(f"/sessions/{sid}/forecast")
        response = client.post(
            f"/sessions/{sid}/review", json={"factor_id": "pd_age", "decision": "accept"}
        )
        assert response.status_code == 422

    def test_review_before_forecast_conflicts(self, client):
        sid = start(client, mode="Dynamic")
        response = client.post(
            f"/sessions/{sid}/review", json={"factor_id": "fh_diabetes", "decision": "accept"}
        )
        assert response.status_code == 409

    def test_questions_blocked_until_reviewed(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        client.post(f"/sessions/{sid}/forecast")
        assert client.post(f"/sessions/{sid}/next").status_code == 409

    def test_correction_requires_index(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        cards = client.post(f"/sessions/{sid}/forecast").json()["prefilled"]
        response = client.post(
            f"/sessions/{sid}/review",
            json={"factor_id": cards[0]["factor_id"], "decision": "correct"},
        )
        assert response.status_code == 422

    def test_re_review_conflicts(self, client):
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        cards = client.post(f"/sessions/{sid}/forecast").json()["prefilled"]
        fid = cards[0]["factor_id"]
        assert client.post(
            f"/sessions/{sid}/review", json={"factor_id": fid, "decision": "accept"}
        ).status_code == 200
        assert client.post(
            f"/sessions/{sid}/review", json={"factor_id": fid, "decision": "accept"}
        ).status_code == 409

    def test_full_dynamic_session(self, client):
        sid = start(client, mode="Dynamic")
        cards, asked, reason = complete_dynamic(client, sid, corrections=1)
        assert cards
        assert reason
        assert not (set(asked) & {c["factor_id"] for c in cards})
        report = client.post(f"/sessions/{sid}/finalize").json()
        assert len(report["contributions"]) == len(cards) + len(asked)
        snapshot = client.get(f"/sessions/{sid}").json()
        corrected = [c for c in snapshot["prefilled"] if c["review"] == "Corrected"]
        assert len(corrected) == 1

    def test_dynamic_asks_fewer_with_evidence(self, client):
        sid = start(client, mode="Dynamic")
        _, asked, _ = complete_dynamic(client, sid)
        assert len(asked) < 30


class TestPersistence:
    def test_log_is_contiguous_and_terminal(self, client, config):
        sid = start(client, mode="Dynamic")
        complete_dynamic(client, sid, corrections=1)
        client.post(f"/sessions/{sid}/finalize")
        events = read_events(config.data_dir / f"{sid}.jsonl")
        assert [e["seq"] for e in events] == list(range(len(events)))
        kinds = [e["kind"] for e in events]
        assert kinds[0] == "Started"
        assert kinds[-1] == "Finalized"
        assert kinds.count("Forecasted") == 1

    def test_snapshot_survives_restart(self, client, config):
        sid = start(client, mode="Dynamic")
        complete_dynamic(client, sid, corrections=2)
        client.post(f"/sessions/{sid}/finalize")
        before = client.get(f"/sessions/{sid}").json()
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        assert fresh.get(f"/sessions/{sid}").json() == before

    def test_completion_is_rederived_after_restart(self, client, config):
        # the Done transition is never logged; a restarted session asks
        # again and the deterministic gateway repeats the stop decision
        sid = start(client, mode="Dynamic")
        complete_dynamic(client, sid)
        assert client.get(f"/sessions/{sid}").json()["state"] == "Completed"
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        assert fresh.get(f"/sessions/{sid}").json()["state"] == "Questioning"
        body = fresh.post(f"/sessions/{sid}/next").json()
        assert body.get("done") is True
        assert fresh.get(f"/sessions/{sid}").json()["state"] == "Completed"

    def test_finalize_replays_byte_identical(self, client, config):
        sid = start(client, mode="Dynamic")
        complete_dynamic(client, sid, corrections=1)
        original = client.post(f"/sessions/{sid}/finalize").content
        for _ in range(2):
            fresh = TestClient(create_app(config), raise_server_exceptions=False)
            assert fresh.post(f"/sessions/{sid}/finalize").content == original

    def test_resume_mid_questionnaire(self, client, config):
        sid = start(client)
        for _ in range(5):
            fid = client.post(f"/sessions/{sid}/next").json()["ask"]["factor_id"]
            client.post(f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": 0})
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        snapshot = fresh.get(f"/sessions/{sid}").json()
        assert snapshot["questions_answered"] == 5
        asked, reason = drive_to_done(fresh, sid)
        assert len(asked) == 25
        assert reason == "questionnaire complete"

    def test_pending_ask_survives_restart(self, client, config):
        sid = start(client)
        ask = client.post(f"/sessions/{sid}/next").json()["ask"]
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        snapshot = fresh.get(f"/sessions/{sid}").json()
        assert snapshot["pending_ask"] == ask
        again = fresh.post(f"/sessions/{sid}/next").json()["ask"]
        assert again == ask


class TestLogCorruption:
    def sid_with_answers(self, client, count=3):
        sid = start(client)
        for _ in range(count):
            fid = client.post(f"/sessions/{sid}/next").json()["ask"]["factor_id"]
            client.post(f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": 0})
        return sid

    def test_truncated_tail_recovers(self, client, config):
        sid = self.sid_with_answers(client)
        path = config.data_dir / f"{sid}.jsonl"
        before = client.get(f"/sessions/{sid}").json()
        with open(path, "a", encoding="utf-8") as fh:
            fh.write('{"session_id": "' + sid + '", "seq": 99, "ki')
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        assert fresh.get(f"/sessions/{sid}").json() == before

    def test_sequence_gap_refuses_to_load(self, client, config):
        sid = self.sid_with_answers(client)
        path = config.data_dir / f"{sid}.jsonl"
        lines = path.read_text(encoding="utf-8").splitlines()
        del lines[2]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        response = fresh.get(f"/sessions/{sid}")
        assert response.status_code == 500
        assert "gap" in response.json()["detail"]

    def test_duplicate_line_skipped(self, client, config):
        sid = self.sid_with_answers(client)
        path = config.data_dir / f"{sid}.jsonl"
        last = path.read_text(encoding="utf-8").splitlines()[-1]
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(last + "\n")
        before = client.get(f"/sessions/{sid}").json()
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        assert fresh.get(f"/sessions/{sid}").json() == before

    def test_event_after_finalized(self, client, config):
        sid = start(client)
        drive_to_done(client, sid)
        client.post(f"/sessions/{sid}/finalize")
        path = config.data_dir / f"{sid}.jsonl"
        events = read_events(path)
        extra = {
            "session_id": sid, "seq": len(events), "ts": 0.0,
            "kind": "Answered", "payload": {"factor_id": "lh_smoking", "choice_index": 0},
        }
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(extra) + "\n")
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        response = fresh.get(f"/sessions/{sid}")
        assert response.status_code == 500
        assert "Finalized" in response.json()["detail"]

    def test_log_must_start_with_started(self, client, config, kb):
        path = config.data_dir / f"{'f' * 32}.jsonl"
        record = {
            "session_id": "f" * 32, "seq": 0, "ts": 0.0,
            "kind": "Answered", "payload": {"factor_id": "lh_smoking", "choice_index": 0},
        }
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        fresh = TestClient(create_app(config), raise_server_exceptions=False)
        assert fresh.get(f"/sessions/{'f' * 32}").status_code == 500

    def test_read_events_reports_gap_position(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(
            '{"seq": 0, "kind": "Started", "payload": {}}\n'
            '{"seq": 2, "kind": "Asked", "payload": {}}\n',
            encoding="utf-8",
        )
        with pytest.raises(CorruptLog, match="expected 1, found 2"):
            read_events(path)


class TestWriteAhead:
    def test_failed_append_discards_mutation(self, client, config, monkeypatch):
        sid = start(client)
        fid = client.post(f"/sessions/{sid}/next").json()["ask"]["factor_id"]

        def explode(path, line):
            raise OSError("disk full")

        monkeypatch.setattr(api, "_append_line", explode)
        response = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": 1}
        )
        assert response.status_code == 500
        monkeypatch.undo()

        snapshot = client.get(f"/sessions/{sid}").json()
        assert fid not in snapshot["answers"]
        assert snapshot["pending_ask"]["factor_id"] == fid
        retry = client.post(
            f"/sessions/{sid}/answers", json={"factor_id": fid, "choice_index": 1}
        )
        assert retry.status_code == 200


class TestConcurrency:
    def test_parallel_workers_complete_one_session(self, app, client, config):
        sid = start(client)

        def worker():
            local = TestClient(app, raise_server_exceptions=False)
            while True:
                body = local.post(f"/sessions/{sid}/next").json()
                if body.get("done"):
                    return
                response = local.post(
                    f"/sessions/{sid}/answers",
                    json={"factor_id": body["ask"]["factor_id"], "choice_index": 0},
                )
                assert response.status_code in (200, 409)

        threads = [threading.Thread(target=worker) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        snapshot = client.get(f"/sessions/{sid}").json()
        assert snapshot["state"] == "Completed"
        assert snapshot["questions_answered"] == 30
        events = read_events(config.data_dir / f"{sid}.jsonl")
        assert [e["seq"] for e in events] == list(range(len(events)))


class TestHygiene:
    def test_responses_never_leak_the_api_key(self, config, monkeypatch):
        monkeypatch.setenv("ARQUEST_LLM_KEY", "hunter2-super-secret")
        client = TestClient(create_app(config), raise_server_exceptions=False)
        sid = start(client, mode="Dynamic")
        link_ehr(client, sid)
        bodies = [client.post(f"/sessions/{sid}/forecast").text,
                  client.get(f"/sessions/{sid}").text]
        for body in bodies:
            assert "hunter2-super-secret" not in body


class TestServiceOracle:
    def test_keyword_hit_reads_riskiest(self, kb):
        details = PersonalDetails(44, Gender.FEMALE, "Braga", "teacher")
        snippet = EvidenceSnippet(
            id="s0", text="condition: tobacco smoking",
            provenance=(SourceKind.HEALTH_RECORDS, "conditions[0]"), date=None,
        )
        profile = UserProfile(
            details=details, snippets=(snippet,),
            shared_kinds=frozenset({SourceKind.HEALTH_RECORDS}), region=None,
        )
        oracle = service_oracle(profile, kb)
        smoking = kb.factor("lh_smoking")
        assert oracle("lh_smoking") == len(smoking.choices) - 1
        assert oracle("fh_cancer") == 0
