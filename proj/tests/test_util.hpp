#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "crashsev/util.hpp"

namespace testutil {

// Fresh directory under the system temp dir; removed on scope exit.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("crashsev_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
    std::filesystem::path write(const std::string& name, const std::string& text) const {
        crashsev::write_text_file(path / name, text);
        return path / name;
    }
};

}  // namespace testutil
