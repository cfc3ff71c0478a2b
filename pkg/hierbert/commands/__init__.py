"""
Один модуль на команду CLI; каждый экспортирует register(subparsers)
"""

from hierbert.commands import build_data, evaluate, finetune, pretrain, probe, sweep

COMMANDS = [build_data, pretrain, finetune, probe, evaluate, sweep]
