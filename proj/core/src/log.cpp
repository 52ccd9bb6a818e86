#include "kvcar/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace kvcar {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("KVCAR_LOG");
        if (!env) return LogLevel::error;
        std::string v(env);
        if (v == "debug") return LogLevel::debug;
        if (v == "info") return LogLevel::info;
        return LogLevel::error;
    }();
    return level;
}

void log_message(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    const char* tag = level == LogLevel::error ? "error" : level == LogLevel::info ? "info" : "debug";
    std::cerr << "[kvcar:" << tag << "] " << msg << "\n";
}

} // namespace kvcar
