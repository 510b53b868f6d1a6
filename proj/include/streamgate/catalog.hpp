#pragma once
/**
 * catalog.hpp
 *
 * Site-indexed, time-ordered manifest of images. A Catalog is built once
 * (ingest or manifest load) and treated as an immutable value afterwards;
 * stages derive new catalogs rather than editing one in place.
 *
 * Manifest format: JSON Lines, one record per line, UTF-8.
 */

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "image_io.hpp"
#include "parallel.hpp"

namespace streamgate {

inline constexpr int kNumLabels = 6;

using Timestamp = std::chrono::sys_seconds;

// ---------------------------------------------------------------------------
// Timestamps (UTC, second resolution)

inline std::optional<Timestamp> make_timestamp(int y, int mo, int d, int h, int mi, int s) {
    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                             day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59)
        return std::nullopt;
    return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

/// Parses "YYYY-MM-DDTHH:MM:SSZ".
inline std::optional<Timestamp> parse_iso8601(std::string_view text) {
    int y, mo, d, h, mi, s;
    char tail = 0;
    const std::string str(text);
    if (std::sscanf(str.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%c", &y, &mo, &d, &h, &mi, &s, &tail) != 7 ||
        tail != 'Z' || str.size() != 20)
        return std::nullopt;
    return make_timestamp(y, mo, d, h, mi, s);
}

inline std::string format_iso8601(Timestamp t) {
    using namespace std::chrono;
    const auto days = floor<std::chrono::days>(t);
    const year_month_day ymd{days};
    const hh_mm_ss hms{t - days};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                  static_cast<int>(hms.seconds().count()));
    return buf;
}

/// Parses the EXIF "YYYY:MM:DD HH:MM:SS" form, interpreted as UTC.
inline std::optional<Timestamp> parse_exif_datetime(std::string_view text) {
    int y, mo, d, h, mi, s;
    const std::string str(text);
    if (std::sscanf(str.c_str(), "%4d:%2d:%2d %2d:%2d:%2d", &y, &mo, &d, &h, &mi, &s) != 6)
        return std::nullopt;
    return make_timestamp(y, mo, d, h, mi, s);
}

// ---------------------------------------------------------------------------
// Records

struct QualityFlags {
    bool overexposed = false;
    bool underexposed = false;
    bool grayscale = false;
    bool blurred = false;
    bool flared = false;
    bool triggered = false;
    bool bad_timestamp = false;

    static constexpr std::array<std::string_view, 7> names = {
        "overexposed", "underexposed", "grayscale", "blurred",
        "flared",      "triggered",    "bad_timestamp"};

    [[nodiscard]] std::array<bool, 7> as_array() const noexcept {
        return {overexposed, underexposed, grayscale, blurred, flared, triggered, bad_timestamp};
    }
    [[nodiscard]] bool passes() const noexcept {
        for (bool f : as_array())
            if (f) return false;
        return true;
    }
    /// Sets the flag called `name`; returns false for unknown names.
    bool set(std::string_view name, bool value = true) noexcept {
        bool* slots[7] = {&overexposed, &underexposed, &grayscale, &blurred,
                          &flared,      &triggered,    &bad_timestamp};
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) {
                *slots[i] = value;
                return true;
            }
        return false;
    }
    QualityFlags& operator|=(const QualityFlags& o) noexcept {
        overexposed |= o.overexposed;
        underexposed |= o.underexposed;
        grayscale |= o.grayscale;
        blurred |= o.blurred;
        flared |= o.flared;
        triggered |= o.triggered;
        bad_timestamp |= o.bad_timestamp;
        return *this;
    }
    friend bool operator==(const QualityFlags&, const QualityFlags&) = default;
};

enum class Stage { Raw, Filtered, Enhanced, Augmented };

inline std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::Raw: return "raw";
    case Stage::Filtered: return "filtered";
    case Stage::Enhanced: return "enhanced";
    case Stage::Augmented: return "augmented";
    }
    return "raw";
}

inline Stage stage_from_string(std::string_view s) {
    if (s == "raw") return Stage::Raw;
    if (s == "filtered") return Stage::Filtered;
    if (s == "enhanced") return Stage::Enhanced;
    if (s == "augmented") return Stage::Augmented;
    throw ValidationError("unknown stage '" + std::string(s) + "'");
}

struct ImageRecord {
    std::string id;
    std::string site_id;
    Timestamp captured_at{};
    std::string path;
    std::optional<int> label;
    QualityFlags quality;
    Stage stage = Stage::Raw;
    std::optional<std::string> parent_id;
    bool unenhanced = false;              // enhanced stage only: no temporal neighbors
    std::optional<std::uint64_t> seed;    // augmented stage only: effective seed

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

inline bool valid_label(int label) noexcept { return label >= 1 && label <= kNumLabels; }

// ---------------------------------------------------------------------------
// Catalog

class Catalog {
public:
    using SiteMap = std::map<std::string, std::vector<ImageRecord>>;

    Catalog() = default;

    /// Groups records by site and sorts each site by (captured_at, id).
    /// Throws ValidationError on duplicate ids, bad labels or dangling parents.
    /// Parents may live in an upstream manifest when `check_parents` is false.
    static Catalog from_records(std::vector<ImageRecord> records, bool check_parents = true) {
        Catalog cat;
        std::set<std::string> ids;
        for (auto& r : records) {
            if (!ids.insert(r.id).second)
                throw ValidationError("catalog: duplicate record id '" + r.id + "'");
            if (r.label && !valid_label(*r.label))
                throw ValidationError("catalog: label out of range for '" + r.id + "'");
            cat.sites_[r.site_id].push_back(std::move(r));
        }
        for (auto& [site, recs] : cat.sites_) {
            (void)site;
            std::sort(recs.begin(), recs.end(), [](const ImageRecord& a, const ImageRecord& b) {
                return a.captured_at != b.captured_at ? a.captured_at < b.captured_at : a.id < b.id;
            });
            cat.total_ += recs.size();
        }
        for (const auto& [site, recs] : cat.sites_) {
            (void)site;
            if (!check_parents) break;
            for (const auto& r : recs)
                if (r.stage == Stage::Augmented && (!r.parent_id || !ids.count(*r.parent_id)))
                    throw ValidationError("catalog: augmented record '" + r.id +
                                          "' references a missing parent");
        }
        return cat;
    }

    [[nodiscard]] const SiteMap& sites() const noexcept { return sites_; }
    [[nodiscard]] std::size_t images_total() const noexcept { return total_; }
    [[nodiscard]] bool empty() const noexcept { return total_ == 0; }

    [[nodiscard]] std::vector<std::string> site_ids() const {
        std::vector<std::string> out;
        for (const auto& [s, _] : sites_) out.push_back(s);
        return out;
    }

    /// All records, sites in key order, each site in time order.
    [[nodiscard]] std::vector<ImageRecord> records() const {
        std::vector<ImageRecord> out;
        out.reserve(total_);
        for (const auto& [_, recs] : sites_) out.insert(out.end(), recs.begin(), recs.end());
        return out;
    }

    [[nodiscard]] const ImageRecord* find(std::string_view id) const {
        for (const auto& [_, recs] : sites_)
            for (const auto& r : recs)
                if (r.id == id) return &r;
        return nullptr;
    }

    /// Sub-catalog restricted to the given sites.
    [[nodiscard]] Catalog restrict_to(const std::set<std::string>& keep) const {
        std::vector<ImageRecord> out;
        for (const auto& [s, recs] : sites_)
            if (keep.count(s)) out.insert(out.end(), recs.begin(), recs.end());
        return from_records_unchecked(std::move(out));
    }

    friend bool operator==(const Catalog&, const Catalog&) = default;

private:
    static Catalog from_records_unchecked(std::vector<ImageRecord> records) {
        Catalog cat;
        for (auto& r : records) {
            ++cat.total_;
            cat.sites_[r.site_id].push_back(std::move(r));
        }
        return cat;
    }

    SiteMap sites_;
    std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Manifest (JSON Lines)

inline nlohmann::ordered_json record_to_json(const ImageRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["site_id"] = r.site_id;
    j["captured_at"] = format_iso8601(r.captured_at);
    j["path"] = r.path;
    j["label"] = r.label ? nlohmann::ordered_json(*r.label) : nlohmann::ordered_json(nullptr);
    auto flags = nlohmann::ordered_json::array();
    const auto arr = r.quality.as_array();
    for (std::size_t i = 0; i < arr.size(); ++i)
        if (arr[i]) flags.push_back(QualityFlags::names[i]);
    j["quality"] = std::move(flags);
    j["stage"] = to_string(r.stage);
    j["parent_id"] = r.parent_id ? nlohmann::ordered_json(*r.parent_id) : nlohmann::ordered_json(nullptr);
    if (r.stage == Stage::Enhanced) j["unenhanced"] = r.unenhanced;
    if (r.seed) j["seed"] = *r.seed;
    return j;
}

inline ImageRecord record_from_json(const nlohmann::json& j) {
    ImageRecord r;
    r.id = j.at("id").get<std::string>();
    r.site_id = j.at("site_id").get<std::string>();
    const auto ts = parse_iso8601(j.at("captured_at").get<std::string>());
    if (!ts) throw ValidationError("manifest: bad captured_at for '" + r.id + "'");
    r.captured_at = *ts;
    r.path = j.at("path").get<std::string>();
    if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
    for (const auto& f : j.at("quality"))
        if (!r.quality.set(f.get<std::string>()))
            throw ValidationError("manifest: unknown quality flag in '" + r.id + "'");
    r.stage = stage_from_string(j.at("stage").get<std::string>());
    if (j.contains("parent_id") && !j["parent_id"].is_null())
        r.parent_id = j["parent_id"].get<std::string>();
    if (j.contains("unenhanced")) r.unenhanced = j["unenhanced"].get<bool>();
    if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
    return r;
}

inline void write_manifest(const std::filesystem::path& path, const Catalog& cat) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [_, recs] : cat.sites())
        for (const auto& r : recs) out << record_to_json(r).dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Loads a manifest; records whose parent lives in another manifest can be
/// accepted by passing `allow_external_parents`.
inline Catalog read_manifest(const std::filesystem::path& path, bool allow_external_parents = false) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("missing manifest " + path.string());
    std::vector<ImageRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return Catalog::from_records(std::move(records), /*check_parents=*/!allow_external_parents);
}

// ---------------------------------------------------------------------------
// Ingest

struct NamingRule {
    /// Capture groups: 1 = site id, 2 = YYYYMMDD, 3 = HHMMSS.
    std::string filename_pattern = R"(^(.+)_(\d{8})-(\d{6})\.[A-Za-z0-9]+$)";
    bool exif_fallback = true;
    /// Optional CSV (`id,label` or `filename,label`) at the root of the tree.
    std::string labels_file = "labels.csv";
};

struct IngestError {
    std::string path;
    std::string reason;
};

struct IngestResult {
    Catalog catalog;
    std::vector<IngestError> errors;
};

namespace detail {

inline bool has_image_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline std::map<std::string, std::string> read_label_csv(const std::filesystem::path& path) {
    std::map<std::string, std::string> out;
    std::ifstream in(path);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        std::string key = line.substr(0, comma), value = line.substr(comma + 1);
        if (first && (key == "id" || key == "filename")) {
            first = false;
            continue;
        }
        first = false;
        out[key] = value;
    }
    return out;
}

}  // namespace detail

/// Walks `root_dir` recursively. Site and time come from the filename pattern
/// when it matches, otherwise from EXIF DateTimeOriginal with the parent
/// directory name as the site id.
inline IngestResult ingest(const std::filesystem::path& root_dir, const NamingRule& naming = {},
                           int jobs = 1) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root_dir))
        throw ValidationError("ingest: missing directory " + root_dir.string());

    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root_dir)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), root_dir);
        if (rel.filename().string().starts_with('.') || !detail::has_image_extension(rel)) continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());

    const std::regex pattern(naming.filename_pattern);
    struct Parsed {
        std::optional<ImageRecord> record;
        std::optional<IngestError> error;
    };
    std::vector<Parsed> parsed(files.size());

    parallel_for(files.size(), jobs, [&](std::size_t i) {
        const fs::path& rel = files[i];
        const fs::path full = root_dir / rel;
        ImageRecord r;
        r.id = rel.generic_string();
        r.path = full.lexically_normal().generic_string();
        std::vector<std::uint8_t> bytes;
        try {
            bytes = read_file_bytes(full);
            (void)decode_image(bytes, full.string(), /*header_only=*/true);
        } catch (const std::exception& e) {
            parsed[i].error = IngestError{r.id, std::string("unreadable: ") + e.what()};
            return;
        }
        const std::string name = rel.filename().string();
        std::smatch m;
        std::optional<Timestamp> when;
        if (std::regex_match(name, m, pattern) && m.size() >= 4) {
            const std::string date = m[2], time = m[3];
            when = make_timestamp(std::stoi(date.substr(0, 4)), std::stoi(date.substr(4, 2)),
                                  std::stoi(date.substr(6, 2)), std::stoi(time.substr(0, 2)),
                                  std::stoi(time.substr(2, 2)), std::stoi(time.substr(4, 2)));
            r.site_id = m[1];
        }
        if (!when && naming.exif_fallback) {
            if (const auto dt = exif_datetime_original(bytes)) {
                when = parse_exif_datetime(*dt);
                if (when) {
                    if (!rel.has_parent_path()) {
                        parsed[i].error = IngestError{r.id, "EXIF timestamp found but no site directory"};
                        return;
                    }
                    r.site_id = rel.parent_path().filename().string();
                }
            }
        }
        if (!when) {
            parsed[i].error = IngestError{r.id, "unparseable name and no EXIF DateTimeOriginal"};
            return;
        }
        r.captured_at = *when;
        parsed[i].record = std::move(r);
    });

    IngestResult result;
    std::vector<ImageRecord> records;
    for (auto& p : parsed) {
        if (p.error) result.errors.push_back(std::move(*p.error));
        if (p.record) records.push_back(std::move(*p.record));
    }

    const fs::path labels_path = root_dir / naming.labels_file;
    if (!naming.labels_file.empty() && fs::is_regular_file(labels_path)) {
        const auto labels = detail::read_label_csv(labels_path);
        for (auto& r : records) {
            auto it = labels.find(r.id);
            if (it == labels.end()) it = labels.find(fs::path(r.id).filename().string());
            if (it == labels.end() || it->second.empty()) continue;
            try {
                std::size_t used = 0;
                const int label = std::stoi(it->second, &used);
                if (used != it->second.size() || !valid_label(label)) throw std::invalid_argument("range");
                r.label = label;
            } catch (const std::exception&) {
                result.errors.push_back({r.id, "label '" + it->second + "' not in 1..6"});
            }
        }
    }

    if (records.empty()) throw ValidationError("ingest: zero parseable images");

    std::set<std::tuple<std::string, Timestamp, std::string>> seen;
    for (const auto& r : records) {
        if (!seen.emplace(r.site_id, r.captured_at, fs::path(r.id).filename().string()).second)
            throw ValidationError("ingest: duplicate (site_id, captured_at, filename) for '" + r.id + "'");
    }
    result.catalog = Catalog::from_records(std::move(records));
    return result;
}

// ---------------------------------------------------------------------------
// Label distribution

/// How a record contributes to a label bin. `Equal` counts records whose label
/// equals the bin; `Complement` is the inverted indicator, kept for audits.
enum class IndicatorMode { Equal, Complement };

inline int indicator(int record_label, int bin, IndicatorMode mode) noexcept {
    const bool eq = record_label == bin;
    return (mode == IndicatorMode::Equal) == eq ? 1 : 0;
}

/// P(label = y) for y = 1..6 over all labeled records. Unlabeled records are
/// ignored. Under IndicatorMode::Complement the components sum to 5.
inline std::array<double, kNumLabels> dataset_distribution(const Catalog& cat,
                                                           IndicatorMode mode = IndicatorMode::Equal) {
    std::array<std::int64_t, kNumLabels> counts{};
    std::int64_t labeled = 0;
    for (const auto& [_, recs] : cat.sites())
        for (const auto& r : recs) {
            if (!r.label) continue;
            ++labeled;
            for (int y = 1; y <= kNumLabels; ++y) counts[y - 1] += indicator(*r.label, y, mode);
        }
    if (labeled == 0) throw ValidationError("dataset_distribution: no labeled records");
    std::array<double, kNumLabels> p{};
    for (int y = 0; y < kNumLabels; ++y)
        p[y] = static_cast<double>(counts[y]) / static_cast<double>(labeled);
    return p;
}

// ---------------------------------------------------------------------------
// Timeline sanity

enum class TimelineIssue { SequenceOrder, OutOfRange, Duplicate };

inline std::string_view to_string(TimelineIssue k) {
    switch (k) {
    case TimelineIssue::SequenceOrder: return "sequence_order";
    case TimelineIssue::OutOfRange: return "out_of_range";
    case TimelineIssue::Duplicate: return "duplicate";
    }
    return "";
}

struct TimelineViolation {
    std::string id;
    std::string site_id;
    TimelineIssue issue;
    friend bool operator==(const TimelineViolation&, const TimelineViolation&) = default;
};

inline Timestamp earliest_plausible_timestamp() { return *make_timestamp(2000, 1, 1, 0, 0, 0); }

/// Report-only check. A record is flagged when its timestamp lies before
/// 2000-01-01 or after `now`, when another record of the same site shares its
/// timestamp, or when its file name sorts before a file that was captured
/// earlier (the camera sequence and the clock disagree).
inline std::vector<TimelineViolation> validate_timeline(const Catalog& cat, Timestamp now) {
    std::vector<TimelineViolation> out;
    const Timestamp lo = earliest_plausible_timestamp();
    for (const auto& [site, recs] : cat.sites()) {
        std::string max_name;
        bool have_max = false;
        for (std::size_t i = 0; i < recs.size(); ++i) {
            const auto& r = recs[i];
            if (r.captured_at < lo || r.captured_at > now)
                out.push_back({r.id, site, TimelineIssue::OutOfRange});
            const bool dup = (i > 0 && recs[i - 1].captured_at == r.captured_at) ||
                             (i + 1 < recs.size() && recs[i + 1].captured_at == r.captured_at);
            if (dup) out.push_back({r.id, site, TimelineIssue::Duplicate});
            const std::string name = std::filesystem::path(r.path).filename().string();
            if (have_max && name < max_name) {
                out.push_back({r.id, site, TimelineIssue::SequenceOrder});
            } else {
                max_name = name;
                have_max = true;
            }
        }
    }
    return out;
}

inline std::vector<TimelineViolation> validate_timeline(const Catalog& cat) {
    return validate_timeline(cat, std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now()));
}

}  // namespace streamgate
