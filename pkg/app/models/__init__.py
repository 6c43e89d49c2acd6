# 数据模型包初始化文件
# 包含训练配置、检查点、分析报告和接口请求等数据模型定义
