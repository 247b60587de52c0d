"""HTTP adapter for a remote semantic backend.

Wire contract: one POST per call with a JSON envelope
``{"operator", "instruction", "data", "data_b"?, ...}``. Responses are
operator-specific: filter returns a bare index array, derive and join
return ``{"rows": [...]}``, aggregate returns ``{"result": ...}``, and the
remaining operations return a generic ``{"result": ...}`` envelope. A
response object may carry an optional ``usage`` block; otherwise tokens
are estimated from payload sizes.
"""

from __future__ import annotations

import json
import math
from typing import Any

import httpx

from ..errors import BackendError, ContractViolation
from ..semantic import RowDict, SemanticBackend, Usage


def _estimate(blob: bytes | str) -> int:
    size = len(blob) if isinstance(blob, (bytes, bytearray)) else len(blob.encode("utf-8"))
    return max(math.ceil(size / 4), 1)


class HttpBackend(SemanticBackend):
    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _post(self, payload: dict[str, Any]) -> tuple[Any, Usage]:
        body = json.dumps(payload, default=str)
        try:
            response = self._client.post(
                self.endpoint, content=body, headers={"content-type": "application/json"}
            )
        except httpx.HTTPError as exc:
            raise BackendError(f"backend request failed: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(f"backend returned HTTP {response.status_code}")
        try:
            parsed = response.json()
        except json.JSONDecodeError as exc:
            raise ContractViolation("backend response is not valid JSON") from exc
        usage = Usage(_estimate(body), _estimate(response.content))
        if isinstance(parsed, dict) and isinstance(parsed.get("usage"), dict):
            u = parsed["usage"]
            usage = Usage(int(u.get("input_tokens", 0)), int(u.get("output_tokens", 0)))
        return parsed, usage

    @staticmethod
    def _rows_of(parsed: Any) -> list[RowDict]:
        if not isinstance(parsed, dict) or not isinstance(parsed.get("rows"), list):
            raise ContractViolation('expected a {"rows": [...]} response')
        return parsed["rows"]

    @staticmethod
    def _result_of(parsed: Any) -> Any:
        if not isinstance(parsed, dict) or "result" not in parsed:
            raise ContractViolation('expected a {"result": ...} response')
        return parsed["result"]

    # -- chunk operators -------------------------------------------------

    def filter(self, instruction: str, chunk: list[RowDict]) -> tuple[list[int], Usage]:
        parsed, usage = self._post(
            {"operator": "LLM_FILTER", "instruction": instruction, "data": chunk}
        )
        if not isinstance(parsed, list):
            raise ContractViolation("filter response must be a bare index array")
        return parsed, usage

    def map(self, instruction: str, chunk: list[RowDict]) -> tuple[list[RowDict], Usage]:
        parsed, usage = self._post(
            {"operator": "LLM_DERIVE", "instruction": instruction, "data": chunk}
        )
        rows = self._rows_of(parsed)
        if len(rows) != len(chunk):
            raise ContractViolation(
                f"derive returned {len(rows)} rows for a {len(chunk)}-row chunk"
            )
        known = set(chunk[0]) if chunk else set()
        return [
            {k: v for k, v in row.items() if k not in known} if isinstance(row, dict) else {}
            for row in rows
        ], usage

    def join(
        self, instruction: str, chunk_a: list[RowDict], chunk_b: list[RowDict]
    ) -> tuple[list[RowDict], Usage]:
        parsed, usage = self._post(
            {
                "operator": "LLM_JOIN",
                "instruction": instruction,
                "data": chunk_a,
                "data_b": chunk_b,
            }
        )
        return self._rows_of(parsed), usage

    def aggregate(
        self, instruction: str, chunk: list[RowDict], final: bool
    ) -> tuple[Any, Usage]:
        parsed, usage = self._post(
            {
                "operator": "LLM_AGGREGATE",
                "instruction": instruction,
                "data": chunk,
                "final": final,
            }
        )
        return self._result_of(parsed), usage

    # -- planning and consolidation ---------------------------------------

    def plan(self, question: str, context: str, k: int) -> tuple[str, Usage]:
        parsed, usage = self._post(
            {"operator": "PLAN", "question": question, "context": context, "k": k}
        )
        result = self._result_of(parsed)
        return result if isinstance(result, str) else json.dumps(result), usage

    def judge(self, question: str, candidates: list[dict[str, Any]]) -> tuple[int, Usage]:
        parsed, usage = self._post(
            {"operator": "JUDGE", "question": question, "data": candidates}
        )
        result = self._result_of(parsed)
        try:
            return int(result), usage
        except (TypeError, ValueError) as exc:
            raise ContractViolation(f"judge index {result!r} is not an integer") from exc

    def equal(self, answer_a: str, answer_b: str) -> tuple[bool, Usage]:
        parsed, usage = self._post(
            {"operator": "EQUAL", "answer_a": answer_a, "answer_b": answer_b}
        )
        return bool(self._result_of(parsed)), usage

    def embed(self, text: str) -> tuple[dict[str, float], Usage]:
        parsed, usage = self._post({"operator": "EMBED", "text": text})
        result = self._result_of(parsed)
        if isinstance(result, dict):
            return {str(k): float(v) for k, v in result.items()}, usage
        if isinstance(result, list):
            return {str(i): float(v) for i, v in enumerate(result)}, usage
        raise ContractViolation("embed response must be a vector")

    def translate(
        self,
        instruction: str,
        operator: str,
        schema: list[dict[str, Any]],
        feedback: list[str],
    ) -> tuple[dict[str, Any], Usage]:
        parsed, usage = self._post(
            {
                "operator": "TRANSLATE",
                "instruction": instruction,
                "target": operator,
                "schema": schema,
                "feedback": feedback,
            }
        )
        result = self._result_of(parsed)
        if not isinstance(result, dict):
            raise ContractViolation("translate response must be a params object")
        return result, usage

    def prune_schema(
        self, question: str, table: str, columns: list[dict[str, Any]]
    ) -> tuple[list[str], Usage]:
        parsed, usage = self._post(
            {"operator": "PRUNE", "question": question, "table": table, "data": columns}
        )
        result = self._result_of(parsed)
        if not isinstance(result, list):
            raise ContractViolation("prune response must be a column-name list")
        return [str(c) for c in result], usage
