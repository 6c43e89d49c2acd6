# 工具函数包初始化文件
# 包含日志初始化和随机数子流等通用工具函数
