#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace strudel::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

struct Sink {
    Level threshold = Level::warn;
    std::function<void(Level, const std::string&)> write = [](Level lvl, const std::string& msg) {
        static const char* names[] = {"debug", "info", "warn", "error"};
        std::clog << "[strudel " << names[static_cast<int>(lvl)] << "] " << msg << '\n';
    };
};

inline Sink& sink() {
    static Sink s;
    return s;
}

inline void emit(Level lvl, const std::string& msg) {
    static std::mutex m;
    auto& s = sink();
    if (lvl < s.threshold) return;
    std::lock_guard lock(m);
    s.write(lvl, msg);
}

inline void debug(const std::string& msg) { emit(Level::debug, msg); }
inline void info(const std::string& msg) { emit(Level::info, msg); }
inline void warn(const std::string& msg) { emit(Level::warn, msg); }

}  // namespace strudel::log
