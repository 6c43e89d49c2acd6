"""命名随机子流与基于计数器的随机数块

所有随机性都来自单个 ``seed``：不同用途（训练、数据、蒙特卡洛）使用不同的
命名子流，蒙特卡洛抽样再按固定大小的块划分，第 b 块的生成器只由
(seed, 子流, b) 决定，因此结果与并行 worker 数量无关。
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, List, Tuple, TypeVar

import numpy as np

T = TypeVar("T")

# 常用子流名称
STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_TRAIN = "train"
STREAM_MC = "mc"


def stream_key(name: str) -> int:
    """把子流名称映射为稳定的 32 位整数（与 Python 的 hash 随机化无关）"""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed: int, stream: str, *counter: int) -> np.random.Generator:
    """创建 (seed, stream, counter...) 对应的独立生成器"""
    if seed < 0:
        raise ValueError(f"随机种子必须为非负整数: {seed}")
    sequence = np.random.SeedSequence(seed, spawn_key=(stream_key(stream),) + tuple(counter))
    return np.random.default_rng(sequence)


def iter_blocks(total: int, block_size: int) -> Iterator[Tuple[int, int]]:
    """按固定块大小切分 total 个抽样，依次产生 (块编号, 块内数量)"""
    if block_size < 1:
        raise ValueError(f"块大小必须至少为1: {block_size}")
    block = 0
    start = 0
    while start < total:
        size = min(block_size, total - start)
        yield block, size
        block += 1
        start += size


def map_blocks(
    func: Callable[[np.random.Generator, int], T],
    total: int,
    seed: int,
    stream: str,
    block_size: int,
    workers: int = 1,
    prefix: Tuple[int, ...] = (),
) -> List[T]:
    """对每个计数器块调用 ``func(rng, size)``，按块顺序返回结果

    Args:
        func: 块计算函数，只能依赖传入的生成器
        total: 抽样总数
        seed: 根种子
        stream: 子流名称
        block_size: 每块抽样数
        workers: 并行线程数，结果与该值无关
        prefix: 附加在块编号之前的计数器（如矩阵的行列下标）

    Returns:
        每块的计算结果列表
    """
    blocks = list(iter_blocks(total, block_size))

    def run(item: Tuple[int, int]) -> T:
        block, size = item
        return func(make_rng(seed, stream, *prefix, block), size)

    if workers <= 1 or len(blocks) <= 1:
        return [run(item) for item in blocks]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, blocks))


def derive_seed(seed: int, stream: str, *counter: int) -> int:
    """从子流派生一个新的整数种子（用于第三方库的 random_state）"""
    rng = make_rng(seed, stream, *counter)
    return int(rng.integers(0, 2 ** 31 - 1))
