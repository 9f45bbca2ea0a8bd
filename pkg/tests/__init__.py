# Пакет тестов TreeLab
