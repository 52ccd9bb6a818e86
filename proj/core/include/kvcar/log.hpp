#pragma once
#include <sstream>
#include <string>

namespace kvcar {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level is read once from the KVCAR_LOG environment variable
// (error | info | debug); defaults to error.
LogLevel log_level();
void log_message(LogLevel level, const std::string& msg);

namespace detail {
template <typename... Args>
std::string log_format(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
} // namespace detail

#define KVCAR_LOG_ERROR(...) ::kvcar::log_message(::kvcar::LogLevel::error, ::kvcar::detail::log_format(__VA_ARGS__))
#define KVCAR_LOG_INFO(...)  ::kvcar::log_message(::kvcar::LogLevel::info, ::kvcar::detail::log_format(__VA_ARGS__))
#define KVCAR_LOG_DEBUG(...) ::kvcar::log_message(::kvcar::LogLevel::debug, ::kvcar::detail::log_format(__VA_ARGS__))

} // namespace kvcar
