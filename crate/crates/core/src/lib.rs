//! NAND flash reliability simulator: a calibrated threshold-voltage channel,
//! a Monte Carlo cell array, BCH and LDPC codecs, controller mitigation and
//! recovery flows, closed-form reliability models and a simple FTL.

pub mod analytics;
pub mod bch;
pub mod calibration;
pub mod degradation;
pub mod ecc;
pub mod error;
pub mod flash;
pub mod harness;
pub mod ftl;
pub mod ldpc;
pub mod mitigation;
pub mod recovery;
pub mod voltage;

pub use calibration::{CalibrationTables, DAY, MONTH, WEEK, YEAR};
pub use degradation::{ChannelModel, CouplingCoefficients, DegradationState, ProcessNode};
pub use error::{Error, Result};
pub use voltage::{AwgnModel, CellMode, DistributionSet, GrayMap, PageType, ReadRefs, State, StateDistribution};
