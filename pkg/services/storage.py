"""
Сохранение и загрузка артефактов: база данных, контрольные точки моделей,
файлы нагрузок, отчёты и таблицы
"""

import json
import logging
import os
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd
import torch

from config import CHECKPOINT_FORMAT_VERSION, DATABASE_FORMAT_VERSION
from services.datastore import Database, Schema, load_schema, save_schema
from services.detector import Detector, QueryVAE
from services.estimators import CEModel, LabelNormalizer, build_model
from services.poisongen import GenTrainConfig, GeneratorTriple, build_generator
from services.querylang import PROVENANCES, Query, Workload, validate_query
from utils.error_handler import ConfigurationError, InvalidQueryError

logger = logging.getLogger(__name__)

CHECKPOINT_KINDS = ('ce_model', 'detector', 'generator')


def _schema_path(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return f"{stem}.schema.json"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def save_database(db: Database, path: str) -> None:
    """
    Сохранение базы: сжатый npz со столбцами и схема рядом с ним

    Args:
        db: База данных
        path: Путь к .npz
    """
    _ensure_parent(path)
    arrays: Dict[str, np.ndarray] = {
        '__format_version__': np.array(DATABASE_FORMAT_VERSION),
        '__seed__': np.array(db.seed),
    }
    # Столбцы хранятся под ключами вида table.attribute
    for i, table in enumerate(db.schema.tables):
        for attr in table.attributes:
            arrays[f"{table.name}.{attr.name}"] = np.asarray(db.column(i, attr.name))
    np.savez_compressed(path, **arrays)
    # Схема лежит рядом: <имя>.schema.json
    save_schema(db.schema, _schema_path(path))
    logger.info(f"База {db.fingerprint} сохранена в {path}")


def load_database(path: str) -> Database:
    """Загрузка базы, сохранённой save_database"""
    if not os.path.exists(path):
        raise ConfigurationError(f"Файл базы не найден: {path}")
    schema = load_schema(_schema_path(path))
    with np.load(path) as data:
        version = int(data['__format_version__'])
        if version != DATABASE_FORMAT_VERSION:
            raise ConfigurationError(f"Неподдерживаемая версия формата базы: {version}")
        tables = []
        for table in schema.tables:
            columns = {}
            for attr in table.attributes:
                key = f"{table.name}.{attr.name}"
                if key not in data.files:
                    raise ConfigurationError(f"В файле базы нет столбца {key}")
                columns[attr.name] = data[key]
            tables.append(pd.DataFrame(columns))
        seed = int(data['__seed__'])
    return Database(schema, tables, seed)


def save_checkpoint(obj: Union[CEModel, Detector, GeneratorTriple], path: str,
                    schema: Optional[Schema] = None) -> None:
    """
    Контрольная точка модели: словарь {format_version, kind, metadata, state_dict}

    Args:
        obj: CE-модель, детектор или генератор
        path: Путь к файлу
        schema: Схема (обязательна для генератора)
    """
    if isinstance(obj, CEModel):
        kind = 'ce_model'
        metadata = {
            'family': obj.family,
            'hyperparams': obj.hyperparams,
            'input_dim': obj.input_dim,
            'normalizer': obj.normalizer.to_dict() if obj.normalizer is not None else None,
            'seed': obj.seed,
            'schema': obj.schema.to_dict(),
            'training_curve': list(obj.training_curve),
            'update_steps': obj.update_steps,
        }
        state = obj.network.state_dict()
    elif isinstance(obj, Detector):
        kind = 'detector'
        metadata = {
            'input_dim': obj.input_dim,
            'latent_dim': obj.network.latent_dim,
            'hidden_dims': list(obj.hidden_dims),
            'epsilon': obj.epsilon,
            'beta': obj.beta,
            'seed': obj.seed,
            'training_curve': list(obj.training_curve),
        }
        state = obj.network.state_dict()
    elif isinstance(obj, GeneratorTriple):
        if schema is None:
            raise ConfigurationError("Для контрольной точки генератора нужна схема")
        kind = 'generator'
        # Ширина и число слоёв восстанавливаются из самих сетей
        hidden = obj.lower[0].out_features
        metadata = {
            'noise_dim': obj.noise_dim,
            'hidden_dim': hidden,
            'layers': [
                len(obj.join) // 2 if obj.join is not None else 0,
                len(obj.lower) // 2,
                len(obj.range) // 2,
            ],
            'schema': schema.to_dict(),
        }
        state = obj.state_dict()
    else:
        raise ConfigurationError(f"Неизвестный тип объекта для контрольной точки: {type(obj).__name__}")

    _ensure_parent(path)
    torch.save({'format_version': CHECKPOINT_FORMAT_VERSION, 'kind': kind,
                'metadata': metadata, 'state_dict': state}, path)
    logger.info(f"Контрольная точка {kind} сохранена в {path}")


def load_checkpoint(path: str) -> Union[CEModel, Detector, GeneratorTriple]:
    """Восстановление объекта из контрольной точки"""
    if not os.path.exists(path):
        raise ConfigurationError(f"Контрольная точка не найдена: {path}")
    # Только тензоры и примитивы, без произвольного pickle
    payload = torch.load(path, weights_only=True)
    version = payload.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"Неподдерживаемая версия контрольной точки: {version}")
    kind, meta = payload['kind'], payload['metadata']

    if kind == 'ce_model':
        schema = Schema.from_dict(meta['schema'])
        normalizer = (LabelNormalizer.from_dict(schema.n, meta['normalizer'])
                      if meta['normalizer'] is not None else None)
        model = build_model(meta['family'], schema, meta['hyperparams'], seed=meta['seed'], normalizer=normalizer)
        model.network.load_state_dict(payload['state_dict'])
        model.training_curve = list(meta['training_curve'])
        model.update_steps = meta['update_steps']
        return model

    if kind == 'detector':
        network = QueryVAE(meta['input_dim'], meta['latent_dim'], tuple(meta['hidden_dims'])).to(torch.float64)
        network.load_state_dict(payload['state_dict'])
        detector = Detector(network, meta['input_dim'], meta['epsilon'], meta['latent_dim'], meta['seed'])
        detector.beta = meta['beta']
        detector.hidden_dims = tuple(meta['hidden_dims'])
        detector.training_curve = list(meta['training_curve'])
        return detector

    if kind == 'generator':
        schema = Schema.from_dict(meta['schema'])
        layers = list(meta['layers'])
        # Однотабличный генератор сохранён без G_j
        if layers[0] == 0:
            layers[0] = GenTrainConfig().layers[0]
        cfg = GenTrainConfig(noise_dim=meta['noise_dim'], hidden_dim=meta['hidden_dim'], layers=tuple(layers))
        g = build_generator(schema, cfg)
        g.load_state_dict(payload['state_dict'])
        return g

    raise ConfigurationError(f"Неизвестный тип контрольной точки: {kind}")


def save_workload(workload: Workload, path: str, schema: Schema) -> None:
    """
    Запись нагрузки в JSON-lines: {tables, predicates, cardinality}

    Таблицы и атрибуты записываются по именам.
    """
    _ensure_parent(path)
    # Неразмеченные запросы пишутся с cardinality = null
    labels = workload.labels if workload.is_labeled else [None] * len(workload)
    with open(path, 'w', encoding='utf-8') as f:
        for query, label in zip(workload.queries, labels):
            record = {
                'tables': [schema.tables[t].name for t in sorted(query.tables)],
                'predicates': {name: [lb, ub] for name, (lb, ub) in sorted(query.predicates.items())},
                'cardinality': label,
            }
            f.write(json.dumps(record, ensure_ascii=False) + '\n')
    logger.info(f"Нагрузка '{workload.provenance}' ({len(workload)} запросов) записана в {path}")


def load_workload(path: str, schema: Schema, provenance: str = 'train') -> Workload:
    """Чтение нагрузки из JSON-lines с проверкой каждого запроса по схеме"""
    if provenance not in PROVENANCES:
        raise ConfigurationError(f"Неизвестная метка происхождения: {provenance}")
    if not os.path.exists(path):
        raise ConfigurationError(f"Файл нагрузки не найден: {path}")
    queries: List[Query] = []
    labels: List[Optional[int]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                tables = frozenset(schema.table_index[name] for name in record['tables'])
            except (json.JSONDecodeError, KeyError) as e:
                raise InvalidQueryError(f"{path}:{line_no}: некорректная запись ({e})") from e
            predicates = {name: (float(b[0]), float(b[1])) for name, b in record.get('predicates', {}).items()}
            query = Query(tables=tables, predicates=predicates)
            validate_query(query, schema)
            queries.append(query)
            labels.append(record.get('cardinality'))
    # Нагрузка размечена, только если размечены все записи
    labeled = all(y is not None for y in labels)
    return Workload(queries, [int(y) for y in labels] if labeled else None, provenance=provenance)


def save_report(data: Mapping[str, Any], out_dir: str, name: str = 'report.json') -> str:
    """JSON-отчёт с сортированными ключами (стабилен между повторными запусками)"""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
    return path


def save_table(table: pd.DataFrame, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    table.to_csv(path, index=False)
    return path
