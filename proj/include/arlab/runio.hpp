#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace arlab {
namespace runio {

namespace fs = std::filesystem;

// CSV with a fixed header written on open. Numeric cells use max precision
// so files are a faithful record of a run.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) {
        fs::create_directories(fs::path(path).parent_path());
        os_.open(path);
        if (!os_) throw std::runtime_error("csv: cannot open '" + path + "'");
        cols_ = header.size();
        for (size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
        os_ << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != cols_) throw std::runtime_error("csv: wrong cell count");
        for (size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
        os_ << "\n";
    }

    static std::string num(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
    static std::string num(int64_t v) { return std::to_string(v); }

private:
    std::ofstream os_;
    size_t cols_ = 0;
};

inline void write_json(const std::string& path, const nlohmann::json& j) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path + "'");
    os << j.dump(2) << "\n";
}

// Exclusive ownership of a run directory for the lifetime of the process.
class RunLock {
public:
    explicit RunLock(const std::string& dir) : path_(fs::path(dir) / ".lock") {
        fs::create_directories(dir);
        if (fs::exists(path_))
            throw std::runtime_error("run directory '" + dir + "' is locked by another process (" +
                                     path_.string() + ")");
        std::ofstream os(path_);
        os << "pid " << ::getpid() << "\n";
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

}  // namespace runio
}  // namespace arlab
