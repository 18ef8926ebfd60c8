"""Chat transport, reply parsing, prompt construction, and replay fixtures."""
import json
import socket

import pytest

from conftest import make_context, make_pair
from coopcross.influence import FollowingRelation
from coopcross.llm_backend import (
    SCHEMA_GLOBAL_ORDER,
    SCHEMA_PRECEDENCES,
    AuthFailure,
    FixtureBackend,
    LlmBackend,
    LlmConfig,
    ParseFailure,
    RetriesExhausted,
    SchemaViolation,
    TransportFailure,
    build_merge_prompt,
    build_opinion_prompt,
    build_resolve_prompt,
    chat,
    parse_reply,
    prompt_key,
    render_global_order,
    render_precedences,
)
from coopcross.negotiation import (
    BackendError,
    PassOrder,
    PrecedencePreference,
    RuleBackend,
    intra_group_order,
)


def fast_config(url, **kw):
    base = dict(endpoint_url=url, max_retries=2, backoff_base=0.01,
                rate_limit=0.0, request_timeout=2.0)
    base.update(kw)
    return LlmConfig(**base)


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "test-key-123")


class TestLlmConfig:
    def test_defaults(self):
        cfg = LlmConfig()
        assert cfg.model_name == "negotiator"
        assert cfg.api_key_env_var == "LLM_API_KEY"
        assert cfg.temperature == 0.0

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            LlmConfig.from_dict({"model_name": "m", "bogus": 1})


class TestPromptBuilders:
    def _ctx(self):
        return make_context(
            [0, 1],
            pairs=[make_pair(0, 1, 65.0, 45.0, speed_a=8.0, speed_b=9.0)],
            following=[FollowingRelation(leader=0, follower=1, gap=12.5)],
            arrivals={0: 8.125, 1: 5.0},
        )

    def test_opinion_prompt_lists_pairs_and_following(self):
        prompt = build_opinion_prompt(self._ctx(), 0)
        assert prompt.expected_schema_id == SCHEMA_PRECEDENCES
        assert (
            "- vehicles 0 and 1: vehicle 0 is 65.00 m away at 8.00 m/s, "
            "vehicle 1 is 45.00 m away at 9.00 m/s"
        ) in prompt.user_text
        assert "- vehicle 1 follows vehicle 0 at a gap of 12.50 m" in prompt.user_text
        assert "vehicle 0" in prompt.user_text.splitlines()[0]

    def test_empty_sections_say_none(self):
        prompt = build_opinion_prompt(make_context([0, 1]), 1)
        lines = prompt.user_text.splitlines()
        pair_idx = lines.index("Conflicting vehicle pairs (shared crossing point):")
        assert lines[pair_idx + 1] == "- none"
        follow_idx = lines.index("Car-following relations (same lane):")
        assert lines[follow_idx + 1] == "- none"

    def test_prompts_are_reproducible(self):
        a = build_opinion_prompt(self._ctx(), 0)
        b = build_opinion_prompt(self._ctx(), 0)
        assert a == b
        assert prompt_key(a) == prompt_key(b)

    def test_resolve_prompt_lists_agreed_and_disputed(self):
        ctx = self._ctx()
        ctx = ctx.__class__(**{**ctx.__dict__, "agreed": (
            PrecedencePreference(first=1, second=0, stated_by=1),)})
        prompt = build_resolve_prompt(ctx, [make_pair(0, 1, 65.0, 45.0)])
        assert "- vehicle 1 before vehicle 0" in prompt.user_text
        assert "Disputed pairs needing a final decision:" in prompt.user_text
        assert "- vehicles 0 and 1" in prompt.user_text

    def test_merge_prompt_numbers_its_blocks(self):
        orders = [
            PassOrder(ordered_ids=(0, 1), scope=0, rounds_used=1, backend_name="rule"),
            PassOrder(ordered_ids=(2,), scope=1, rounds_used=0, backend_name="rule"),
        ]
        prompt = build_merge_prompt(orders, make_context([0, 1, 2]))
        assert prompt.expected_schema_id == SCHEMA_GLOBAL_ORDER
        assert "(1) Pass order decided inside each group:" in prompt.user_text
        assert "- group 0: 0 -> 1" in prompt.user_text
        assert "(2) Conflict information between vehicles:" in prompt.user_text
        assert "(3) Requirements:" in prompt.user_text


class TestParseReply:
    VALID = [0, 1, 2]

    def test_plain_array(self):
        raw = '[{"first": 0, "second": 1, "why": "closer"}]'
        assert parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID) == [(0, 1, "closer")]

    def test_fenced_json_with_prose(self):
        raw = (
            "Sure! Here is my answer:\n```json\n"
            '[{"first": 2, "second": 0, "why": "arrives first"}]\n```\nDone.'
        )
        assert parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID) == [
            (2, 0, "arrives first")
        ]

    def test_why_is_optional(self):
        raw = '[{"first": 0, "second": 1}]'
        assert parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID) == [(0, 1, "")]

    def test_no_json_at_all(self):
        with pytest.raises(ParseFailure):
            parse_reply("I think vehicle 0 should go first.",
                        SCHEMA_PRECEDENCES, self.VALID)

    def test_unknown_vehicle_rejected(self):
        raw = '[{"first": 0, "second": 9, "why": ""}]'
        with pytest.raises(SchemaViolation):
            parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID)

    def test_self_pair_rejected(self):
        raw = '[{"first": 1, "second": 1, "why": ""}]'
        with pytest.raises(SchemaViolation):
            parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID)

    def test_non_integer_id_rejected(self):
        for bad in ('[{"first": "0", "second": 1}]',
                    '[{"first": true, "second": 1}]',
                    '[{"second": 1}]',
                    '[42]',
                    '{"first": 0, "second": 1}'):
            with pytest.raises(SchemaViolation):
                parse_reply(bad, SCHEMA_PRECEDENCES, self.VALID)

    def test_global_order_schema(self):
        raw = '[{"id": 2, "group": 1}, {"id": 0}]'
        assert parse_reply(raw, SCHEMA_GLOBAL_ORDER, self.VALID) == [(2, 1), (0, 0)]

    def test_global_order_unknown_vehicle_rejected(self):
        with pytest.raises(SchemaViolation):
            parse_reply('[{"id": 5}]', SCHEMA_GLOBAL_ORDER, self.VALID)

    def test_render_precedences_round_trip(self):
        prefs = [
            PrecedencePreference(first=0, second=1, stated_by=0, rationale="near"),
            PrecedencePreference(first=2, second=0, stated_by=2, rationale=""),
        ]
        raw = render_precedences(prefs)
        assert parse_reply(raw, SCHEMA_PRECEDENCES, self.VALID) == [
            (0, 1, "near"), (2, 0, ""),
        ]

    def test_render_global_order_round_trip(self):
        raw = render_global_order([2, 0, 1], {0: 0, 1: 0, 2: 1})
        assert parse_reply(raw, SCHEMA_GLOBAL_ORDER, self.VALID) == [
            (2, 1), (0, 0), (1, 0),
        ]


class TestChatTransport:
    PROMPT = build_opinion_prompt(
        make_context([0, 1], pairs=[make_pair(0, 1, 30.0, 40.0)]), 0
    )

    def test_happy_path_returns_content(self, mock_chat, api_key):
        mock_chat.script((200, '[{"first": 0, "second": 1, "why": "x"}]'))
        raw = chat(fast_config(mock_chat.url), self.PROMPT)
        assert raw == '[{"first": 0, "second": 1, "why": "x"}]'
        assert len(mock_chat.record) == 1

    def test_request_shape(self, mock_chat, api_key):
        mock_chat.script((200, "[]"))
        chat(fast_config(mock_chat.url, model_name="mini", temperature=0.25),
             self.PROMPT)
        req = mock_chat.record[0]
        assert req["auth"] == "Bearer test-key-123"
        body = req["body"]
        assert body["model"] == "mini"
        assert body["temperature"] == 0.25
        roles = [m["role"] for m in body["messages"]]
        assert roles == ["system", "user"]
        assert body["messages"][1]["content"] == self.PROMPT.user_text

    def test_extra_user_message_is_appended(self, mock_chat, api_key):
        mock_chat.script((200, "[]"))
        chat(fast_config(mock_chat.url), self.PROMPT, extra_user="fix it")
        roles = [m["role"] for m in mock_chat.record[0]["body"]["messages"]]
        assert roles == ["system", "user", "user"]

    def test_missing_api_key_sends_nothing(self, mock_chat, monkeypatch):
        monkeypatch.delenv("LLM_API_KEY", raising=False)
        with pytest.raises(AuthFailure):
            chat(fast_config(mock_chat.url), self.PROMPT)
        assert mock_chat.record == []

    def test_rejected_credentials_do_not_retry(self, mock_chat, api_key):
        mock_chat.script((401, {"error": "bad key"}))
        with pytest.raises(AuthFailure):
            chat(fast_config(mock_chat.url), self.PROMPT)
        assert len(mock_chat.record) == 1

    def test_rate_limited_then_served(self, mock_chat, api_key):
        mock_chat.script((429, {"error": "slow down"}),
                         (500, {"error": "boom"}),
                         (200, "[]"))
        raw = chat(fast_config(mock_chat.url), self.PROMPT)
        assert raw == "[]"
        assert len(mock_chat.record) == 3

    def test_unreachable_endpoint_exhausts_retries(self, api_key):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        cfg = fast_config(f"http://127.0.0.1:{port}/v1/chat/completions")
        with pytest.raises(RetriesExhausted) as exc:
            chat(cfg, self.PROMPT)
        assert len(exc.value.attempts) == cfg.max_retries + 1

    def test_unexpected_status_is_a_hard_failure(self, mock_chat, api_key):
        mock_chat.script((404, {"error": "nope"}))
        with pytest.raises(TransportFailure):
            chat(fast_config(mock_chat.url), self.PROMPT)
        assert len(mock_chat.record) == 1

    def test_malformed_completion_payload(self, mock_chat, api_key):
        mock_chat.script((200, {"unexpected": "shape"}))
        with pytest.raises(TransportFailure):
            chat(fast_config(mock_chat.url), self.PROMPT)


class TestLlmBackend:
    def _ctx(self):
        return make_context([0, 1], pairs=[make_pair(0, 1, 30.0, 40.0)],
                            arrivals={0: 3.0, 1: 4.0})

    def test_opinion_happy_path(self, mock_chat, api_key):
        mock_chat.script((200, '[{"first": 0, "second": 1, "why": "closer"}]'))
        backend = LlmBackend(fast_config(mock_chat.url))
        assert backend.name == "llm:negotiator"
        prefs = backend.opinion(self._ctx(), 1)
        assert len(prefs) == 1
        assert (prefs[0].first, prefs[0].second) == (0, 1)
        assert prefs[0].stated_by == 1
        assert prefs[0].rationale == "closer"

    def test_reformat_retry_recovers(self, mock_chat, api_key):
        mock_chat.script((200, "no json here, sorry"),
                         (200, '[{"first": 0, "second": 1, "why": ""}]'))
        backend = LlmBackend(fast_config(mock_chat.url))
        prefs = backend.opinion(self._ctx(), 0)
        assert len(prefs) == 1
        assert len(mock_chat.record) == 2
        retry_msgs = mock_chat.record[1]["body"]["messages"]
        assert len(retry_msgs) == 3
        assert "could not be used" in retry_msgs[2]["content"]

    def test_two_bad_replies_become_backend_error(self, mock_chat, api_key):
        mock_chat.script((200, "still not json"))
        backend = LlmBackend(fast_config(mock_chat.url))
        with pytest.raises(BackendError):
            backend.opinion(self._ctx(), 0)
        assert len(mock_chat.record) == 2

    def test_transport_failure_becomes_backend_error(self, mock_chat, api_key):
        mock_chat.script((401, {"error": "no"}))
        backend = LlmBackend(fast_config(mock_chat.url))
        with pytest.raises(BackendError):
            backend.opinion(self._ctx(), 0)

    def test_full_negotiation_against_mock(self, mock_chat, api_key):
        mock_chat.script((200, '[{"first": 0, "second": 1, "why": "fcfs"}]'))
        backend = LlmBackend(fast_config(mock_chat.url))
        po = intra_group_order(backend, self._ctx())
        assert po.ordered_ids == (0, 1)
        assert po.rounds_used == 1
        assert not po.fallback


class TestFixtureBackend:
    def _ctx(self):
        return make_context([0, 1], pairs=[make_pair(0, 1, 30.0, 40.0)],
                            arrivals={0: 3.0, 1: 4.0})

    def _record_rule_replies(self, ctx):
        rule = RuleBackend()
        replies = {}
        for vid in ctx.members:
            prompt = build_opinion_prompt(ctx, vid)
            replies[prompt_key(prompt)] = render_precedences(rule.opinion(ctx, vid))
        return replies

    def test_replays_recorded_negotiation(self):
        ctx = self._ctx()
        backend = FixtureBackend(self._record_rule_replies(ctx))
        po = intra_group_order(backend, ctx)
        assert po.ordered_ids == (0, 1)
        assert po.rounds_used == 1
        assert po.backend_name == "fixture"

    def test_miss_is_a_backend_error(self):
        backend = FixtureBackend({})
        with pytest.raises(BackendError):
            backend.opinion(self._ctx(), 0)

    def test_unusable_reply_is_a_backend_error(self):
        ctx = self._ctx()
        prompt = build_opinion_prompt(ctx, 0)
        backend = FixtureBackend({prompt_key(prompt): "not json"})
        with pytest.raises(BackendError):
            backend.opinion(ctx, 0)

    def test_loads_jsonl_file(self, tmp_path):
        ctx = self._ctx()
        path = tmp_path / "replies.jsonl"
        with open(path, "w") as fh:
            for key, reply in self._record_rule_replies(ctx).items():
                fh.write(json.dumps({"prompt_sha256": key, "reply": reply}) + "\n")
        backend = FixtureBackend(str(path))
        po = intra_group_order(backend, ctx)
        assert po.ordered_ids == (0, 1)
