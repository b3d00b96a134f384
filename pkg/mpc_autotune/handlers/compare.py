from pathlib import Path

from ..services import EXIT_OK, CompareParameters, CompareService


async def handle_compare(journal_a: Path, journal_b: Path, out: Path | None = None) -> int:
    service = CompareService(CompareParameters(journal_a=journal_a, journal_b=journal_b, out=out))
    code = await service.execute()
    if code != EXIT_OK:
        return code
    a, b = service.traces
    print(f"A: {journal_a}  {len(a)} trials, final best {a[-1]:.6g}")
    print(f"B: {journal_b}  {len(b)} trials, final best {b[-1]:.6g}")
    print(f"traces: {service.out_path}")
    return EXIT_OK
