#ifndef PROTOCHECK_H
#define PROTOCHECK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PcStatus {
  PC_STATUS_OK = 0,
  PC_STATUS_NULL_ARGUMENT = 1,
  PC_STATUS_INVALID_UTF8 = 2,
  // Unparseable or inconsistent input (CSV, TOML, counts).
  PC_STATUS_INVALID_INPUT = 3,
  // The coefficient is undefined for these counts; no value was written.
  PC_STATUS_NOT_CALCULABLE = 4,
  // Valid input the library does not handle, such as four raters.
  PC_STATUS_UNSUPPORTED = 5,
  PC_STATUS_PANIC = 6,
} PcStatus;

// Built-in lexicon or one parsed from TOML.
typedef struct PcLexicon PcLexicon;

// Rating sets added one CSV text at a time.
typedef struct PcRatings PcRatings;

typedef struct PcReport PcReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *pc_last_error(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void pc_string_free(char *s);

// # Safety
// `out` must be a valid pointer to a double.
enum PcStatus pc_accuracy(uint64_t n11, uint64_t n10, uint64_t n01, uint64_t n00, double *out);

// Cohen's kappa; `PC_STATUS_NOT_CALCULABLE` when chance agreement is 1.
//
// # Safety
// `out` must be a valid pointer to a double.
enum PcStatus pc_cohen_kappa(uint64_t n11, uint64_t n10, uint64_t n01, uint64_t n00, double *out);

// # Safety
// `out` must be a valid pointer to a double.
enum PcStatus pc_gwet_ac1(uint64_t n11, uint64_t n10, uint64_t n01, uint64_t n00, double *out);

// Fleiss' kappa over a row-major `subjects x raters` table of 0/1 cells.
//
// # Safety
// `cells` must point to `subjects * raters` bytes; `out` to a double.
enum PcStatus pc_fleiss_kappa(const uint8_t *cells, size_t subjects, size_t raters, double *out);

// Multi-rater Gwet's AC1 over a row-major `subjects x raters` table.
//
// # Safety
// `cells` must point to `subjects * raters` bytes; `out` to a double.
enum PcStatus pc_gwet_ac1_multi(const uint8_t *cells, size_t subjects, size_t raters, double *out);

// Landis-Koch band name for a coefficient, as a static string that must
// not be freed.
//
// # Safety
// `out` must be a valid pointer.
enum PcStatus pc_landis_koch_band(double value, const char **out);

// Built-in lexicon by task id ("cones", "yeast").
//
// # Safety
// `id` must be a NUL-terminated string; `out` a valid pointer.
enum PcStatus pc_lexicon_builtin(const char *id, struct PcLexicon **out);

// Lexicon from TOML text in the bundled lexicon format.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` a valid pointer.
enum PcStatus pc_lexicon_parse(const char *toml, struct PcLexicon **out);

// Canonical variable name for a surface term; unknown terms come back as
// "unknown:<term>". The result is freed with `pc_string_free`.
//
// # Safety
// `lexicon` must come from this library; `term` must be NUL-terminated.
enum PcStatus pc_lexicon_canonicalize(const struct PcLexicon *lexicon,
                                      const char *term,
                                      char **out);

// # Safety
// `lexicon` must be null or a handle from this library, freed once.
void pc_lexicon_free(struct PcLexicon *lexicon);

// An empty collection of rating files.
struct PcRatings *pc_ratings_new(void);

// Adds one rating file (CSV text with protocol_id, rater_id and 16 label
// columns).
//
// # Safety
// `ratings` must come from `pc_ratings_new`; `csv` must be NUL-terminated.
enum PcStatus pc_ratings_add_csv(struct PcRatings *ratings, const char *csv);

// Number of rating files added so far.
//
// # Safety
// `ratings` must be null or come from `pc_ratings_new`.
size_t pc_ratings_file_count(const struct PcRatings *ratings);

// # Safety
// `ratings` must be null or a handle from this library, freed once.
void pc_ratings_free(struct PcRatings *ratings);

// Agreement report over the subjects all files share. `prevalence` is
// "median", "rater=ID", or null for median.
//
// # Safety
// `ratings` must come from `pc_ratings_new`; `out` must be valid.
enum PcStatus pc_report_build(const struct PcRatings *ratings,
                              const char *prevalence,
                              struct PcReport **out);

// Machine-readable report; freed with `pc_string_free`.
//
// # Safety
// `report` must come from `pc_report_build`; `out` must be valid.
enum PcStatus pc_report_to_csv(const struct PcReport *report, char **out);

// Human-readable table; freed with `pc_string_free`.
//
// # Safety
// `report` must come from `pc_report_build`; `out` must be valid.
enum PcStatus pc_report_to_table(const struct PcReport *report, char **out);

// # Safety
// `report` must be null or a handle from this library, freed once.
void pc_report_free(struct PcReport *report);

// Runs the feature-derived detectors (every label except the three
// result-section labels, which need a model) on one features record in
// TOML. Writes "label,verdict" lines with verdict 1, 0 or NA; freed with
// `pc_string_free`.
//
// # Safety
// `features_toml` and `task_id` must be NUL-terminated; `out` valid.
enum PcStatus pc_detect_features(const char *features_toml, const char *task_id, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOCHECK_H */
