#pragma once

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <unistd.h>

#include "taxengine/taxengine.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir()
    {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("taxengine_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline taxengine::Errc code_of(const std::function<void()>& f)
{
    try {
        f();
    } catch (const taxengine::Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return taxengine::Errc::Io;
}

inline std::string slurp(const std::filesystem::path& file)
{
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline taxengine::Taxonomy tree_of(std::initializer_list<const char*> raw)
{
    std::vector<taxengine::CategoryPath> paths;
    for (const auto* r : raw) {
        paths.push_back(taxengine::parse_path(r));
    }
    return taxengine::Taxonomy::build(paths);
}

inline taxengine::NodeId id_of(const taxengine::Taxonomy& t, const char* raw)
{
    const auto id = t.find(taxengine::parse_path(raw));
    EXPECT_TRUE(id.has_value()) << raw;
    return id.value_or(taxengine::NodeId{});
}

} // namespace testing_support
