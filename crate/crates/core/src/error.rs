//! One error type over every service, with a stable numeric code per
//! named error.

use serde::Serialize;
use thiserror::Error;

use crate::estimators::EstimatorError;
use crate::fabric::FabricError;
use crate::history::HistoryError;
use crate::model::ModelError;
use crate::monitoring::MonitorError;
use crate::scenario::ScenarioError;
use crate::scheduler::SchedulerError;
use crate::steering::SteeringError;

#[derive(Debug, Error)]
pub enum GridError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ErrorCode {
    pub code: i64,
    pub module: &'static str,
    pub name: &'static str,
}

const fn c(code: i64, module: &'static str, name: &'static str) -> ErrorCode {
    ErrorCode { code, module, name }
}

/// Every application error code.
pub const ERROR_CODES: &[ErrorCode] = &[
    c(1001, "core_model", "IllegalTransition"),
    c(1002, "core_model", "ZeroActualRuntime"),
    c(1003, "core_model", "EmptyList"),
    c(1004, "core_model", "InvalidAttributes"),
    c(1005, "core_model", "InvalidJob"),
    c(1101, "sim_fabric", "SiteDown"),
    c(1102, "sim_fabric", "UnknownSite"),
    c(1103, "sim_fabric", "UnknownTask"),
    c(1104, "sim_fabric", "DuplicateTask"),
    c(1105, "sim_fabric", "DuplicateSite"),
    c(1106, "sim_fabric", "IllegalTransition"),
    c(1107, "sim_fabric", "NoLink"),
    c(1108, "sim_fabric", "ClockRegression"),
    c(1109, "sim_fabric", "InvalidConfiguration"),
    c(1201, "history_store", "UnreadableSource"),
    c(1202, "history_store", "StoreIo"),
    c(1203, "history_store", "InvalidTemplates"),
    c(1301, "estimators", "EmptyHistory"),
    c(1302, "estimators", "UnknownSite"),
    c(1303, "estimators", "SiteDown"),
    c(1304, "estimators", "UnknownTask"),
    c(1305, "estimators", "MissingSubmittedEstimate"),
    c(1306, "estimators", "NoLink"),
    c(1307, "estimators", "HistoryUnavailable"),
    c(1308, "estimators", "InvalidEvaluation"),
    c(1401, "monitoring", "UnknownTask"),
    c(1402, "monitoring", "FabricUnreachable"),
    c(1403, "monitoring", "SeqExpired"),
    c(1404, "monitoring", "StoreIo"),
    c(1501, "scheduler", "NoAliveSites"),
    c(1502, "scheduler", "EstimationFailed"),
    c(1503, "scheduler", "UnknownTask"),
    c(1504, "scheduler", "InvalidJob"),
    c(1601, "steering", "Unauthorized"),
    c(1602, "steering", "SessionExpired"),
    c(1603, "steering", "BadCredentials"),
    c(1604, "steering", "IllegalTransition"),
    c(1605, "steering", "NoAliveSites"),
    c(1606, "steering", "UnknownSite"),
    c(1607, "steering", "SiteDown"),
    c(1608, "steering", "UnknownTask"),
    c(1609, "steering", "UnknownJob"),
    c(1610, "steering", "DuplicatePlan"),
    c(1611, "steering", "DuplicateJob"),
    c(1612, "steering", "InvalidPlan"),
    c(1613, "steering", "InvalidPolicy"),
    c(1614, "steering", "InvalidCommand"),
    c(1615, "steering", "NotAvailable"),
    c(1616, "steering", "FabricFailure"),
    c(1701, "scenario", "ParseError"),
];

impl GridError {
    pub fn code(&self) -> i64 {
        match self {
            GridError::Model(e) => match e {
                ModelError::IllegalTransition { .. } => 1001,
                ModelError::ZeroActualRuntime => 1002,
                ModelError::EmptyList => 1003,
                ModelError::InvalidAttributes(_) => 1004,
                ModelError::InvalidJob(_) => 1005,
            },
            GridError::Fabric(e) => match e {
                FabricError::SiteDown(_) => 1101,
                FabricError::UnknownSite(_) => 1102,
                FabricError::UnknownTask(_) => 1103,
                FabricError::DuplicateTask(_) => 1104,
                FabricError::DuplicateSite(_) => 1105,
                FabricError::IllegalTransition { .. } => 1106,
                FabricError::NoLink { .. } => 1107,
                FabricError::ClockRegression { .. } => 1108,
                FabricError::Invalid(_) => 1109,
            },
            GridError::History(e) => match e {
                HistoryError::UnreadableSource { .. } => 1201,
                HistoryError::Io(_) => 1202,
                HistoryError::InvalidTemplates(_) => 1203,
            },
            GridError::Estimator(e) => match e {
                EstimatorError::EmptyHistory => 1301,
                EstimatorError::UnknownSite(_) => 1302,
                EstimatorError::SiteDown(_) => 1303,
                EstimatorError::UnknownTask(_) => 1304,
                EstimatorError::MissingSubmittedEstimate(_) => 1305,
                EstimatorError::NoLink { .. } => 1306,
                EstimatorError::History(_) => 1307,
                EstimatorError::Model(_) => 1308,
            },
            GridError::Monitor(e) => match e {
                MonitorError::UnknownTask(_) => 1401,
                MonitorError::FabricUnreachable => 1402,
                MonitorError::SeqExpired { .. } => 1403,
                MonitorError::Io(_) => 1404,
            },
            GridError::Scheduler(e) => match e {
                SchedulerError::NoAliveSites => 1501,
                SchedulerError::EstimationFailed { .. } => 1502,
                SchedulerError::UnknownTask(_) => 1503,
                SchedulerError::InvalidJob(_) => 1504,
            },
            GridError::Steering(e) => match e {
                SteeringError::Unauthorized => 1601,
                SteeringError::SessionExpired => 1602,
                SteeringError::BadCredentials => 1603,
                SteeringError::IllegalTransition { .. } => 1604,
                SteeringError::NoAliveSites => 1605,
                SteeringError::UnknownSite(_) => 1606,
                SteeringError::SiteDown(_) => 1607,
                SteeringError::UnknownTask(_) => 1608,
                SteeringError::UnknownJob(_) => 1609,
                SteeringError::DuplicatePlan(_) => 1610,
                SteeringError::DuplicateJob(_) => 1611,
                SteeringError::InvalidPlan(_) => 1612,
                SteeringError::InvalidPolicy(_) => 1613,
                SteeringError::InvalidCommand(_) => 1614,
                SteeringError::NotAvailable(_) => 1615,
                SteeringError::Fabric(_) => 1616,
            },
            GridError::Scenario(_) => 1701,
        }
    }

    pub fn info(&self) -> ErrorCode {
        let code = self.code();
        *ERROR_CODES.iter().find(|e| e.code == code).expect("every code is listed")
    }
}
