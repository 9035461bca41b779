//! Baseline mechanisms, offline evaluation and incentive audits.

mod audit;
mod eval;
mod mechanisms;

pub use audit::{ic_audit, ir_audit, request_regret, utility, IcAudit, IrAudit, RegretRow, IR_TOLERANCE};
pub use eval::{
    evaluate, per_mille, summarize, write_reports_csv, write_reports_json, write_summary_csv, ClickSource, EvalReport,
    MetricSummary,
};
pub use mechanisms::{
    best_position, gsp_rank, run_once, GspDynamic, GspFixed, GspRanking, Mechanism, Miaa, PositionRule,
    PreparedAuction, Vcg,
};
