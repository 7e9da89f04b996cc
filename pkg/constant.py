HIGHER_BETTER = 'higher_better'
LOWER_BETTER = 'lower_better'

SEG = 'seg'
CLS = 'cls'
REG = 'reg'
DET = 'det'
TASK_TYPES: tuple[str, ...] = (SEG, CLS, REG, DET)

TS = 'ts'
CG = 'cg'
AU = 'au'
PARADIGMS: tuple[str, ...] = (TS, CG, AU)

PERCENT = 'percent'
ABSOLUTE = 'absolute'
DELTA_MODES: tuple[str, ...] = (PERCENT, ABSOLUTE)

REPORT_FORMATS: tuple[str, ...] = ('json', 'csv', 'md', 'png')

__METRIC_DIRECTION = {
    'dsc': HIGHER_BETTER,
    'hd': LOWER_BETTER,
    'hd95': LOWER_BETTER,
    'auc': HIGHER_BETTER,
    'f1': HIGHER_BETTER,
    'mcc': HIGHER_BETTER,
    'accuracy': HIGHER_BETTER,
    'iou': HIGHER_BETTER,
    'mre': LOWER_BETTER,
}

__PRIMARY_METRIC = {
    SEG: 'dsc',  # 区域重叠
    CLS: 'auc',
    REG: 'mre',  # 原始分辨率像素误差
    DET: 'iou',
}

__TASK_TYPE_NAME = {
    SEG: 'Seg',
    CLS: 'Cls',
    REG: 'Reg',
    DET: 'Det',
}


def metric_direction(metric: str) -> str:
    """
    返回指标的优化方向 (higher_better / lower_better)
    """
    if not metric:
        raise ValueError('metric must be a non-empty string')
    try:
        return __METRIC_DIRECTION[metric.lower()]
    except KeyError:
        raise ValueError(f'unknown metric: {metric}') from None


def primary_metric(task_type: str) -> str:
    """
    返回任务类型用于模型选择的主指标
    """
    if not task_type:
        raise ValueError('task_type must be a non-empty string')
    try:
        return __PRIMARY_METRIC[task_type.lower()]
    except KeyError:
        raise ValueError(f'unknown task type: {task_type}') from None


def task_type_name(task_type: str) -> str:
    return __TASK_TYPE_NAME.get(task_type.lower(), task_type)


def normalize_paradigm(paradigm: str) -> str:
    if not paradigm:
        raise ValueError('paradigm must be a non-empty string')
    value = paradigm.lower()
    if value not in PARADIGMS:
        raise ValueError(f'unknown paradigm: {paradigm}')
    return value
