"""
Функции для форматирования результатов в консоли
"""

from typing import Any, List, Mapping, Optional, Sequence, Union

import pandas as pd

from config import EMOJI


def format_number(value: Union[int, float], decimal_places: int = 0) -> str:
    """
    Форматирование чисел с разделителями тысяч

    Args:
        value: Число для форматирования
        decimal_places: Количество знаков после запятой

    Returns:
        Отформатированная строка
    """
    if decimal_places == 0:
        formatted = f"{value:,.0f}"
    else:
        formatted = f"{value:,.{decimal_places}f}"

    return formatted.replace(',', ' ')


def format_ratio(value: float) -> str:
    """Кратность роста ошибки: x3.42"""
    return f"x{value:.2f}"


def format_seconds(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)}m {rest:.0f}s"


def format_qerror_summary(summary: Mapping[str, float], title: str = 'Q-error') -> str:
    """Одна строка со средним и процентилями Q-error"""
    return (f"{EMOJI['report']} {title}: mean {summary['mean']:.3f} | p50 {summary['p50']:.3f} | "
            f"p90 {summary['p90']:.3f} | p95 {summary['p95']:.3f} | p99 {summary['p99']:.3f} | "
            f"max {summary['max']:.3f}")


def format_attack_report(report: Mapping[str, Any]) -> str:
    """
    Сводка отчёта эксперимента

    Args:
        report: Словарь AttackReport.to_dict()

    Returns:
        Многострочный текст для консоли
    """
    lines = [
        f"{EMOJI['target']} Эксперимент: база {report['database']}, бюджет {format_number(report['budget'])}",
        f"  чёрный ящик {report['black_box_family']}, суррогат {report['surrogate_family']}",
        format_qerror_summary(report['clean'], 'Чистая модель'),
    ]
    for method, row in report['methods'].items():
        arrow = EMOJI['chart_up'] if row['ratio'] > 1 else EMOJI['chart_down']
        lines.append(f"{arrow} {method}: mean {row['mean']:.3f} ({format_ratio(row['ratio'])}), "
                     f"расхождение {row['divergence']:.4f}, запросов {row['poison_count']}")
    overhead = report.get('overhead')
    if overhead:
        lines.append(f"{EMOJI['clock']} Обучение {format_seconds(overhead['train_time_s'])}, "
                     f"генерация {format_seconds(overhead['generation_time_s'])}, "
                     f"атака {format_seconds(overhead['attack_time_s'])}")
    counters = report.get('counters')
    if counters:
        lines.append(f"{EMOJI['info']} Шаги ({counters['algorithm']}): генератор {counters['generator_steps']}, "
                     f"суррогат {counters['surrogate_updates']}, всего {counters['total_steps']}")
    return "\n".join(lines)


def format_table(table: pd.DataFrame, title: str, columns: Optional[Sequence[str]] = None) -> str:
    """Таблица результатов (сравнение методов, развёртка, испытания)"""
    shown = table if columns is None else table[[c for c in columns if c in table.columns]]
    return f"{EMOJI['report']} {title}\n{shown.to_string(index=False, float_format=lambda v: f'{v:.4g}')}"


def format_incremental(reports: List[Mapping[str, Any]]) -> str:
    lines = [f"{EMOJI['report']} Инкрементальный сценарий"]
    for i, report in enumerate(reports, start=1):
        row = report['methods']['pace']
        lines.append(f"  раунд {i}: {report['clean']['mean']:.3f} -> {row['mean']:.3f} "
                     f"({format_ratio(row['ratio'])})")
    return "\n".join(lines)


def format_speculation(profile: Mapping[str, Any]) -> str:
    """Косинусы кандидатов и выбранное семейство"""
    lines = [f"{EMOJI['target']} Угаданное семейство: {profile['chosen']}"
             + (f" {EMOJI['warning']} ничья" if profile.get('tie') else '')]
    for family, cosine in sorted(profile['cosines'].items(), key=lambda item: -item[1]):
        lines.append(f"  {family}: {cosine:.4f}")
    return "\n".join(lines)


def format_status(ok: bool, message: str) -> str:
    return f"{EMOJI['success'] if ok else EMOJI['error']} {message}"