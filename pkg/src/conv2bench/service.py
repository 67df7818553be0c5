"""HTTP face of the gold-standard annotation workflow.

Serves the batch item stream, accepts label submissions, reports progress,
and computes judge profiles once labeling is complete.  The browser UI is
served statically from the same process.
"""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .goldstand import (
    AnnotationItem,
    BatchStore,
    ItemNotFound,
    ProfileError,
    judge_profile,
)
from .judging import VerdictTable

logger = logging.getLogger(__name__)


class LabelSubmission(BaseModel):
    item_key: str
    label: bool
    annotator_id: str


def _item_view(item: AnnotationItem, position: int, total: int) -> dict:
    return {
        "item_key": item.key,
        "response_text": item.response_text,
        "question": item.question,
        "source": item.source,
        "position": position,
        "total": total,
    }


def create_app(
    store: BatchStore,
    judge_tables: dict[str, list[VerdictTable]] | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    judge_tables = judge_tables or {}
    app = FastAPI(title="conv2bench annotation service")
    # The UI is served same-origin from this process; permissive CORS only
    # matters for dev tooling pointed at a separately served bundle.
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def _check_batch(batch_id: str) -> None:
        if batch_id != store.batch.batch_id:
            raise HTTPException(status_code=404, detail=f"unknown batch: {batch_id}")

    @app.get("/api/batch/{batch_id}/next")
    def next_item(batch_id: str, annotator: str = Query(..., min_length=1)):
        _check_batch(batch_id)
        found = store.next_unlabeled(annotator)
        if found is None:
            return {"done": True, "total": store.total}
        item, position = found
        return {"done": False, "item": _item_view(item, position, store.total)}

    @app.get("/api/batch/{batch_id}/item/{position}")
    def item_at(batch_id: str, position: int):
        _check_batch(batch_id)
        try:
            item = store.item_at(position)
        except ItemNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return {"done": False, "item": _item_view(item, position, store.total)}

    @app.post("/api/batch/{batch_id}/label")
    def submit_label(batch_id: str, submission: LabelSubmission):
        _check_batch(batch_id)
        try:
            state = store.record_label(
                submission.item_key, submission.label, submission.annotator_id
            )
        except ItemNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return {"ok": True, "conflict": state.conflict}

    @app.get("/api/batch/{batch_id}/progress")
    def progress(batch_id: str):
        _check_batch(batch_id)
        return store.progress()

    @app.get("/api/batch/{batch_id}/profile")
    def profile(batch_id: str, judge: str | None = None):
        _check_batch(batch_id)
        if not judge_tables:
            raise HTTPException(status_code=409, detail="no judge verdicts loaded")
        if judge is None:
            if len(judge_tables) > 1:
                raise HTTPException(
                    status_code=400,
                    detail=f"specify ?judge= (have {sorted(judge_tables)})",
                )
            judge = next(iter(judge_tables))
        tables = judge_tables.get(judge)
        if not tables:
            raise HTTPException(status_code=404, detail=f"unknown judge: {judge}")
        try:
            report = judge_profile(store, tables)
        except ProfileError as exc:
            return JSONResponse(status_code=409, content={"error": str(exc)})
        return report.to_record()

    @app.get("/api/health")
    def health():
        return {"ok": True, "batch_id": store.batch.batch_id, "total": store.total}

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(
    store: BatchStore,
    judge_tables: dict[str, list[VerdictTable]] | None = None,
    ui_dir: str | Path | None = None,
    host: str = "127.0.0.1",
    port: int = 8321,
) -> None:
    import uvicorn

    app = create_app(store, judge_tables, ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
